pub mod reference_mil;
pub mod oracles;
