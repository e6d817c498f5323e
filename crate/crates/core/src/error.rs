use thiserror::Error;

use crate::align::AlignError;
use crate::baseline::BaselineError;
use crate::dump::DumpError;
use crate::repr::ReprError;
use crate::retrieval::RetrievalError;
use crate::stats::StatsError;
use crate::synth::SynthError;

/// Crate-level error; every variant is prefixed with the module that raised it.
///
/// The inner error is rendered in the message rather than exposed as
/// `source()`, so error-chain printers do not repeat it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dump-io: {0}")]
    Dump(DumpError),
    #[error("neuron-repr: {0}")]
    Repr(ReprError),
    #[error("alignment-core: {0}")]
    Align(AlignError),
    #[error("retrieval-eval: {0}")]
    Retrieval(RetrievalError),
    #[error("baseline-sim: {0}")]
    Baseline(BaselineError),
    #[error("stats: {0}")]
    Stats(StatsError),
    #[error("synthgen: {0}")]
    Synth(SynthError),
}

macro_rules! impl_from {
    ($($inner:ty => $variant:ident),* $(,)?) => {
        $(impl From<$inner> for Error {
            fn from(e: $inner) -> Self {
                Error::$variant(e)
            }
        })*
    };
}

impl_from!(
    DumpError => Dump,
    ReprError => Repr,
    AlignError => Align,
    RetrievalError => Retrieval,
    BaselineError => Baseline,
    StatsError => Stats,
    SynthError => Synth,
);

pub type Result<T, E = Error> = std::result::Result<T, E>;
