#![allow(dead_code)]

use mflqg::consistency::PicardOptions;
use mflqg::strategy::Equilibrium;
use mflqg::{InitialLaw, ModelParams, TimeGrid};

/// A parameter set that satisfies the contraction condition comfortably.
pub fn reference() -> ModelParams {
    ModelParams {
        a: 0.2,
        b: 1.0,
        f: 0.4,
        sigma: 0.3,
        c: 0.1,
        d: 0.5,
        h: 0.3,
        l: 0.4,
        k: 0.5,
        q: 1.0,
        r: 2.0,
        s: 0.6,
        eta: 0.5,
        n0: 0.5,
        t: 1.0,
    }
}

pub fn equilibrium(p: ModelParams, law: InitialLaw) -> Equilibrium {
    Equilibrium::solve(p, law, &TimeGrid::new(p.t, 2000).unwrap(), &PicardOptions::default()).unwrap()
}
