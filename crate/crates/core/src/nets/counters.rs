//! Per-thread evaluation counters used to check which networks a code path touches.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounts {
    /// Forward passes of x0-mode denoisers (students).
    pub x0_denoiser: u64,
    /// Forward passes of eps-mode denoisers (teachers).
    pub eps_denoiser: u64,
    pub featnet: u64,
    pub discriminator: u64,
}

thread_local! {
    static COUNTS: Cell<EvalCounts> = const { Cell::new(EvalCounts { x0_denoiser: 0, eps_denoiser: 0, featnet: 0, discriminator: 0 }) };
}

pub fn snapshot() -> EvalCounts {
    COUNTS.with(Cell::get)
}

pub(crate) fn bump(f: impl FnOnce(&mut EvalCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

impl EvalCounts {
    pub fn since(self, earlier: EvalCounts) -> EvalCounts {
        EvalCounts {
            x0_denoiser: self.x0_denoiser - earlier.x0_denoiser,
            eps_denoiser: self.eps_denoiser - earlier.eps_denoiser,
            featnet: self.featnet - earlier.featnet,
            discriminator: self.discriminator - earlier.discriminator,
        }
    }
}
