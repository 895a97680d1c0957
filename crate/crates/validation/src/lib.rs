//! Reference implementations used to cross-check the `confnmt` metrics.
//! They favour directness over speed.

pub mod oracles;
