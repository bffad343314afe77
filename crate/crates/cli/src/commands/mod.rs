//! Subcommand implementations. Each one applies its flags on top of the
//! loaded configuration before hashing it, so the recorded hash describes
//! the settings actually used.

pub mod eval;
pub mod mil;
pub mod open_set;
pub mod pipeline;
pub mod probe;
pub mod synth;
pub mod text;
pub mod tile;

use cers_core::Exec;

use crate::cli::Command;
use crate::config::RunConfig;
use crate::error::Result;

pub struct Ctx {
    pub cfg: RunConfig,
    pub exec: Exec,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Self {
        Ctx {
            cfg,
            exec: Exec::default(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seed()
    }

    pub fn hash(&self) -> String {
        self.cfg.hash()
    }
}

pub fn dispatch(command: &Command, ctx: &mut Ctx) -> Result<()> {
    match command {
        Command::Tile(a) => tile::run(a, ctx),
        Command::Synth(a) => synth::run(a, ctx),
        Command::TrainMil(a) => mil::run(a, ctx),
        Command::Topk(a) => mil::run_topk(a),
        Command::TrainArpl(a) => open_set::run_train(a, ctx),
        Command::Detect(a) => open_set::run_detect(a, ctx),
        Command::Probe(a) => probe::run(a, ctx),
        Command::Zeroshot(a) => text::run_zeroshot(a),
        Command::Textmetrics(a) => text::run_textmetrics(a),
        Command::Calibrate(a) => eval::run_calibrate(a, ctx),
        Command::Eval(a) => eval::run_eval(a, ctx),
        Command::Report(a) => eval::run_report(a),
        Command::Run(a) => pipeline::run(a, ctx),
    }
}
