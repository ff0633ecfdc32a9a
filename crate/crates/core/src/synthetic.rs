//! Synthetic multi-behavior corpus with planted view -> favorite ->
//! buy chains of the same item. Used for learnability checks and as
//! demo data: the buy at the end of each chain is fully determined by
//! the two interactions before it.

use crate::data::Event;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

pub const PV: u8 = 0;
pub const FAV: u8 = 1;
pub const BUY: u8 = 2;
pub const BEHAVIOR_NAMES: [&str; 3] = ["pv", "fav", "buy"];
pub const TARGET_NAME: &str = "buy";

#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub chains_per_user: usize,
    pub seed: u64,
}

/// Deterministic event log: each user interacts in chains
/// `(item, pv) (item, fav) (item, buy)` over consecutive timestamps.
pub fn planted_chain_events(spec: &SyntheticSpec) -> Vec<Event> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut events = Vec::with_capacity(spec.users * spec.chains_per_user * 3);
    for user in 0..spec.users as u64 {
        let mut ts = 0i64;
        for _ in 0..spec.chains_per_user {
            let item = rng.gen_range(0..spec.items) as u64;
            for behavior in [PV, FAV, BUY] {
                events.push(Event { user, item, behavior, timestamp: ts });
                ts += 1;
            }
        }
    }
    events
}

/// Write events as a comma-separated log with a header row.
pub fn write_event_csv(events: &[Event], path: &Path) -> Result<()> {
    let mut out = String::from("user_id,item_id,behavior,timestamp\n");
    for e in events {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.user,
            e.item,
            BEHAVIOR_NAMES[e.behavior as usize],
            e.timestamp
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
