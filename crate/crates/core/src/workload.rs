//! Randomized scenarios for seed sweeps.

use crate::ids::{Endpoint, Tick};
use crate::netsim::{LinkParams, Scenario, ScriptInitiate, ScriptRead, SplitMix64};
use crate::trace::Mode;
use crate::transaction::FieldWrite;

pub const STANDARD_HORIZON: Tick = 200;
pub const STANDARD_KEYS: [u8; 4] = [1, 2, 3, 4];

/// A scenario drawn from `seed` on a link with the default fault rates:
/// a handful of initiations from both endpoints (so some cross), one to
/// three fields each, observer reads throughout, and one seed in ten with
/// the endpoints on different payload schemas.
pub fn standard_scenario(seed: u64, mode: Mode) -> Scenario {
    let mut rng = SplitMix64::new(seed).split(0x5ce0);
    let link = LinkParams {
        one_way_delay: 1 + rng.below(5),
        frame_tx_time: 1 + rng.below(8),
        ..LinkParams::default()
    };
    let mut s = Scenario::new(format!("standard-{seed}"), STANDARD_HORIZON, link);
    s.mode = mode;
    s.seed = seed;
    if rng.below(10) == 0 {
        s.endpoints.b.schema_version = 2;
    }
    for _ in 0..2 + rng.below(4) {
        let endpoint = if rng.below(2) == 0 { Endpoint::A } else { Endpoint::B };
        let at = rng.below(120);
        let mut keys = STANDARD_KEYS.to_vec();
        let n = 1 + rng.below(3) as usize;
        let writes = (0..n)
            .map(|_| {
                let key = keys.remove(rng.below(keys.len() as u64) as usize);
                FieldWrite { key, value: 1 + rng.below(999) as i64 }
            })
            .collect();
        s.initiate.push(ScriptInitiate { endpoint, at, writes });
    }
    for _ in 0..4 + rng.below(8) {
        let endpoint = if rng.below(2) == 0 { Endpoint::A } else { Endpoint::B };
        s.read.push(ScriptRead { endpoint, at: rng.below(STANDARD_HORIZON - 10), keys: STANDARD_KEYS.to_vec() });
    }
    s.initiate.sort_by_key(|i| i.at);
    s.read.sort_by_key(|r| r.at);
    s
}
