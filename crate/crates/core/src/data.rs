//! Multi-behavior event log ingestion and sequence preparation.
//!
//! Raw logs are delimiter-separated rows of `user, item, behavior,
//! timestamp`. Events become fixed-length behavior-aware sequences
//! (front-padded, most recent interaction last), which are masked for
//! the Cloze objective and split leave-one-out on the target behavior.

use crate::error::{Error, Result};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

/// Token row reserved for padding in the item/behavior tables.
pub const PAD_TOKEN: usize = 0;
/// Token row reserved for masked positions.
pub const MASK_TOKEN: usize = 1;
/// Reserved rows before real ids start.
pub const RESERVED_TOKENS: usize = 2;

/// One user-item interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub user: u64,
    pub item: u64,
    pub behavior: u8,
    pub timestamp: i64,
}

/// Declared behavior vocabulary with exactly one target type.
#[derive(Clone, Debug)]
pub struct BehaviorSchema {
    behaviors: Vec<String>,
    target: u8,
    pub delimiter: char,
    pub strict: bool,
}

impl BehaviorSchema {
    pub fn new(behaviors: Vec<String>, target: &str, delimiter: char, strict: bool) -> Result<Self> {
        let target_idx = behaviors
            .iter()
            .position(|b| b == target)
            .ok_or_else(|| Error::Config(format!("target behavior '{target}' not in vocabulary")))?;
        let mut seen = std::collections::BTreeSet::new();
        for b in &behaviors {
            if !seen.insert(b.clone()) {
                return Err(Error::Config(format!("duplicate behavior '{b}' in vocabulary")));
            }
        }
        Ok(Self { behaviors, target: target_idx as u8, delimiter, strict })
    }

    pub fn target(&self) -> u8 {
        self.target
    }

    pub fn behavior_count(&self) -> usize {
        self.behaviors.len()
    }

    pub fn behavior_id(&self, name: &str) -> Option<u8> {
        self.behaviors.iter().position(|b| b == name).map(|i| i as u8)
    }

    pub fn behavior_name(&self, id: u8) -> &str {
        &self.behaviors[id as usize]
    }
}

/// Parse output: events sorted by (user, timestamp) plus a count of
/// rows skipped in non-strict mode.
#[derive(Debug)]
pub struct ParsedLog {
    pub events: Vec<Event>,
    pub malformed: usize,
}

/// Read a delimiter-separated event log. An optional header row is
/// detected by a non-numeric first field. Unknown behavior labels are
/// always schema errors naming the row; otherwise-malformed rows are
/// errors only in strict mode.
pub fn parse_event_log(path: &Path, schema: &BehaviorSchema) -> Result<ParsedLog> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut events = Vec::new();
    let mut malformed = 0usize;

    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let row = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(schema.delimiter).map(str::trim).collect();
        if row == 1 && fields.first().map_or(false, |f| f.parse::<u64>().is_err()) {
            // Header row.
            continue;
        }
        if fields.len() != 4 {
            if schema.strict {
                return Err(Error::Schema {
                    line: row,
                    message: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            malformed += 1;
            continue;
        }
        let user = fields[0].parse::<u64>();
        let item = fields[1].parse::<u64>();
        let ts = fields[3].parse::<i64>();
        let (user, item, ts) = match (user, item, ts) {
            (Ok(u), Ok(i), Ok(t)) => (u, i, t),
            _ => {
                if schema.strict {
                    return Err(Error::Schema { line: row, message: "non-numeric field".into() });
                }
                malformed += 1;
                continue;
            }
        };
        let behavior = schema.behavior_id(fields[2]).ok_or_else(|| Error::Schema {
            line: row,
            message: format!("unknown behavior label '{}'", fields[2]),
        })?;
        events.push(Event { user, item, behavior, timestamp: ts });
    }

    events.sort_by_key(|e| (e.user, e.timestamp));
    Ok(ParsedLog { events, malformed })
}

/// Catalog statistics derived from the full event log.
#[derive(Clone, Debug)]
pub struct DatasetStats {
    /// Sorted original item ids; dense id = index.
    pub vocab: Vec<u64>,
    /// Interaction count per dense item id (any behavior type).
    pub frequency: Vec<u64>,
    pub behavior_count: usize,
}

impl DatasetStats {
    pub fn build(events: &[Event], behavior_count: usize) -> Self {
        let mut vocab: Vec<u64> = events.iter().map(|e| e.item).collect();
        vocab.sort_unstable();
        vocab.dedup();
        let mut frequency = vec![0u64; vocab.len()];
        for e in events {
            let dense = vocab.binary_search(&e.item).expect("item in vocab");
            frequency[dense] += 1;
        }
        Self { vocab, frequency, behavior_count }
    }

    pub fn dense(&self, item: u64) -> Option<u32> {
        self.vocab.binary_search(&item).ok().map(|i| i as u32)
    }

    pub fn item_count(&self) -> usize {
        self.vocab.len()
    }
}

/// One position of a padded behavior-aware sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Pad,
    /// Visible interaction with a dense item id.
    Item { item: u32, behavior: u8 },
    /// Hidden interaction; fields hold the true label.
    Masked { item: u32, behavior: u8 },
}

/// Fixed-length behavior-aware sequence: a contiguous PAD prefix
/// followed by interactions in non-decreasing timestamp order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BehaviorSequence {
    slots: Vec<Slot>,
}

impl BehaviorSequence {
    /// Keep the most recent `j` interactions, front-padding shorter
    /// histories.
    pub fn from_events(events: &[(u32, u8)], j: usize) -> Self {
        let keep = events.len().min(j);
        let mut slots = vec![Slot::Pad; j - keep];
        for &(item, behavior) in &events[events.len() - keep..] {
            slots.push(Slot::Item { item, behavior });
        }
        Self { slots }
    }

    /// Rebuild from raw slots (cache deserialization); the PAD-prefix
    /// invariant is enforced.
    pub fn from_slots(slots: Vec<Slot>) -> Result<Self> {
        let seq = Self { slots };
        if !seq.pad_prefix_ok() {
            return Err(Error::Schema {
                line: 0,
                message: "PAD positions must form a contiguous prefix".into(),
            });
        }
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> Slot {
        self.slots[i]
    }

    /// Item token ids fed to the embedding table (PAD/MASK substituted).
    pub fn item_tokens(&self) -> Vec<usize> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Pad => PAD_TOKEN,
                Slot::Masked { .. } => MASK_TOKEN,
                Slot::Item { item, .. } => *item as usize + RESERVED_TOKENS,
            })
            .collect()
    }

    /// Behavior token ids fed to the embedding table.
    pub fn behavior_tokens(&self) -> Vec<usize> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Pad => PAD_TOKEN,
                Slot::Masked { .. } => MASK_TOKEN,
                Slot::Item { behavior, .. } => *behavior as usize + RESERVED_TOKENS,
            })
            .collect()
    }

    /// True at every non-PAD position.
    pub fn attention_mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| !matches!(s, Slot::Pad)).collect()
    }

    /// `(position, true item)` for every masked position.
    pub fn masked_positions(&self) -> Vec<(usize, u32)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Slot::Masked { item, .. } => Some((i, *item)),
                _ => None,
            })
            .collect()
    }

    /// Positions that are neither PAD nor masked.
    pub fn visible_positions(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| matches!(s, Slot::Item { .. }).then_some(i))
            .collect()
    }

    /// Count of visible positions with the given behavior.
    pub fn count_behavior(&self, behavior: u8) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Item { behavior: b, .. } if *b == behavior))
            .count()
    }

    /// Remove the last visible position with the given behavior and
    /// grow the PAD prefix by one. `None` if no such position exists.
    pub fn drop_last_of(&self, behavior: u8) -> Option<Self> {
        let pos = self
            .slots
            .iter()
            .rposition(|s| matches!(s, Slot::Item { behavior: b, .. } if *b == behavior))?;
        let mut slots = Vec::with_capacity(self.slots.len());
        slots.push(Slot::Pad);
        for (i, s) in self.slots.iter().enumerate() {
            if i != pos {
                slots.push(*s);
            }
        }
        Some(Self { slots })
    }

    /// Structural invariant: PAD positions form a contiguous prefix.
    pub fn pad_prefix_ok(&self) -> bool {
        let first_real = self.slots.iter().position(|s| !matches!(s, Slot::Pad));
        match first_real {
            None => true,
            Some(k) => self.slots[k..].iter().all(|s| !matches!(s, Slot::Pad)),
        }
    }
}

/// Cloze masking mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Mask every target-behavior position.
    Train,
    /// Mask only the final target-behavior position.
    Eval,
}

/// Replace target-behavior interactions with mask tokens, recording
/// true labels. Returns `None` when the sequence holds no
/// target-behavior position (skip-sample signal).
pub fn apply_cloze_mask(
    seq: &BehaviorSequence,
    target: u8,
    mode: MaskMode,
) -> Option<BehaviorSequence> {
    let targets: Vec<usize> = seq
        .slots
        .iter()
        .enumerate()
        .filter_map(|(i, s)| matches!(s, Slot::Item { behavior, .. } if *behavior == target).then_some(i))
        .collect();
    if targets.is_empty() {
        return None;
    }
    let to_mask: &[usize] = match mode {
        MaskMode::Train => &targets,
        MaskMode::Eval => std::slice::from_ref(targets.last().unwrap()),
    };
    let mut slots = seq.slots.clone();
    for &i in to_mask {
        if let Slot::Item { item, behavior } = slots[i] {
            slots[i] = Slot::Masked { item, behavior };
        }
    }
    Some(BehaviorSequence { slots })
}

/// Build per-user sequences from sorted events. Users with fewer than
/// two target-behavior interactions are excluded (they cannot be split
/// leave-one-out) and counted.
pub struct BuiltSequences {
    pub sequences: BTreeMap<u64, BehaviorSequence>,
    pub excluded_users: usize,
}

pub fn build_sequences(
    events: &[Event],
    stats: &DatasetStats,
    j: usize,
    target: u8,
) -> Result<BuiltSequences> {
    if j < 2 {
        return Err(Error::Config(format!("sequence length J must be >= 2, got {j}")));
    }
    let mut sequences = BTreeMap::new();
    let mut excluded = 0usize;
    let mut start = 0usize;
    while start < events.len() {
        let user = events[start].user;
        let mut end = start;
        while end < events.len() && events[end].user == user {
            end += 1;
        }
        let user_events = &events[start..end];
        let target_count = user_events.iter().filter(|e| e.behavior == target).count();
        if target_count < 2 {
            excluded += 1;
        } else {
            let dense: Vec<(u32, u8)> = user_events
                .iter()
                .map(|e| (stats.dense(e.item).expect("item in vocab"), e.behavior))
                .collect();
            sequences.insert(user, BehaviorSequence::from_events(&dense, j));
        }
        start = end;
    }
    Ok(BuiltSequences { sequences, excluded_users: excluded })
}

/// Leave-one-out split: the last target interaction is the test item,
/// the second-to-last the validation item, the remainder train masks.
pub struct Splits {
    /// Train-mode masked sequences (both held-out targets removed).
    /// Users whose window retains < 3 targets appear unmasked and are
    /// skipped at batch assembly.
    pub train: BTreeMap<u64, BehaviorSequence>,
    pub valid: BTreeMap<u64, BehaviorSequence>,
    pub test: BTreeMap<u64, BehaviorSequence>,
}

pub fn split_leave_one_out(
    sequences: &BTreeMap<u64, BehaviorSequence>,
    target: u8,
) -> Splits {
    let mut train = BTreeMap::new();
    let mut valid = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (&user, seq) in sequences {
        let Some(test_seq) = apply_cloze_mask(seq, target, MaskMode::Eval) else { continue };
        let Some(valid_base) = seq.drop_last_of(target) else { continue };
        let Some(valid_seq) = apply_cloze_mask(&valid_base, target, MaskMode::Eval) else {
            continue;
        };
        test.insert(user, test_seq);
        valid.insert(user, valid_seq);
        // The sequence window may hold fewer targets than the user's
        // full history; both held-out targets are always dropped.
        if let Some(train_base) = valid_base.drop_last_of(target) {
            let masked = apply_cloze_mask(&train_base, target, MaskMode::Train);
            train.insert(user, masked.unwrap_or(train_base));
        }
    }
    Splits { train, valid, test }
}

/// Popularity-proportional negative candidates for one evaluation user.
#[derive(Clone, Debug)]
pub struct NegativeSample {
    pub user: u64,
    pub candidates: Vec<u32>,
    /// Set when the catalog could not supply `n` distinct candidates.
    pub truncated: bool,
}

/// Draw `n` distinct items without replacement with probability
/// proportional to interaction count, excluding the ground truth.
/// Uses the exponential-keys scheme, so a fixed RNG seed reproduces
/// the sample exactly.
pub fn sample_negatives<R: Rng>(
    user: u64,
    truth: u32,
    n: usize,
    frequency: &[u64],
    rng: &mut R,
) -> NegativeSample {
    // key = uniform^(1/weight); the top-n keys are a weighted sample
    // without replacement.
    let mut keyed: Vec<(f64, u32)> = Vec::with_capacity(frequency.len());
    for (id, &freq) in frequency.iter().enumerate() {
        if id as u32 == truth || freq == 0 {
            continue;
        }
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        keyed.push((u.powf(1.0 / freq as f64), id as u32));
    }
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let truncated = keyed.len() < n;
    let candidates = keyed.into_iter().take(n).map(|(_, id)| id).collect();
    NegativeSample { user, candidates, truncated }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn schema() -> BehaviorSchema {
        BehaviorSchema::new(
            vec!["pv".into(), "fav".into(), "cart".into(), "buy".into()],
            "buy",
            ',',
            false,
        )
        .unwrap()
    }

    fn write_log(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_well_formed_rows_in_timestamp_order() {
        let f = write_log("1,10,pv,300\n1,11,buy,100\n1,12,cart,200\n");
        let log = parse_event_log(f.path(), &schema()).unwrap();
        assert_eq!(log.events.len(), 3);
        assert_eq!(log.malformed, 0);
        let ts: Vec<i64> = log.events.iter().map(|e| e.timestamp).collect();
        assert_eq!(ts, vec![100, 200, 300]);
    }

    #[test]
    fn counts_malformed_rows_when_not_strict() {
        let f = write_log("1,10,pv,100\nbadrow\n1,11,buy,200\n");
        let log = parse_event_log(f.path(), &schema()).unwrap();
        assert_eq!(log.events.len(), 2);
        assert_eq!(log.malformed, 1);
    }

    #[test]
    fn strict_mode_rejects_malformed_rows() {
        let f = write_log("1,10,pv,100\nbadrow\n");
        let strict =
            BehaviorSchema::new(vec!["pv".into(), "buy".into()], "buy", ',', true).unwrap();
        assert!(matches!(
            parse_event_log(f.path(), &strict),
            Err(Error::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn accepts_three_behavior_retail_schema() {
        let s = BehaviorSchema::new(
            vec!["buy".into(), "cart".into(), "pv".into()],
            "buy",
            ',',
            false,
        )
        .unwrap();
        let f = write_log("1,5,buy,1\n1,6,cart,2\n1,7,pv,3\n");
        let log = parse_event_log(f.path(), &s).unwrap();
        assert_eq!(log.events.len(), 3);
    }

    #[test]
    fn unknown_behavior_is_schema_error_naming_the_row() {
        let f = write_log("1,10,pv,100\n1,11,swim,200\n");
        match parse_event_log(f.path(), &schema()) {
            Err(Error::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("swim"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let missing = Path::new("/nonexistent/events.csv");
        assert!(matches!(parse_event_log(missing, &schema()), Err(Error::Io { .. })));
    }

    #[test]
    fn header_row_is_skipped() {
        let f = write_log("user_id,item_id,behavior,timestamp\n1,10,pv,100\n");
        let log = parse_event_log(f.path(), &schema()).unwrap();
        assert_eq!(log.events.len(), 1);
        assert_eq!(log.malformed, 0);
    }

    fn seq_of(events: &[(u32, u8)], j: usize) -> BehaviorSequence {
        BehaviorSequence::from_events(events, j)
    }

    #[test]
    fn short_history_is_front_padded() {
        let s = seq_of(&[(1, 0), (2, 0), (3, 3), (4, 0), (5, 3)], 8);
        assert_eq!(s.len(), 8);
        assert!(matches!(s.slot(0), Slot::Pad));
        assert!(matches!(s.slot(2), Slot::Pad));
        assert!(matches!(s.slot(3), Slot::Item { item: 1, .. }));
        assert!(s.pad_prefix_ok());
        assert_eq!(s.attention_mask()[..3], [false, false, false]);
    }

    #[test]
    fn long_history_keeps_most_recent() {
        let events: Vec<(u32, u8)> = (0..12).map(|i| (i as u32, 0)).collect();
        let s = seq_of(&events, 8);
        assert!(matches!(s.slot(0), Slot::Item { item: 4, .. }));
        assert!(matches!(s.slot(7), Slot::Item { item: 11, .. }));
    }

    #[test]
    fn build_sequences_excludes_users_with_single_target() {
        let events = vec![
            Event { user: 1, item: 10, behavior: 3, timestamp: 1 },
            Event { user: 1, item: 11, behavior: 3, timestamp: 2 },
            Event { user: 2, item: 10, behavior: 3, timestamp: 1 },
            Event { user: 2, item: 12, behavior: 0, timestamp: 2 },
        ];
        let stats = DatasetStats::build(&events, 4);
        let built = build_sequences(&events, &stats, 8, 3).unwrap();
        assert_eq!(built.sequences.len(), 1);
        assert_eq!(built.excluded_users, 1);
        assert!(built.sequences.contains_key(&1));
    }

    #[test]
    fn build_sequences_lengths_match_recount_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut events = Vec::new();
        for user in 0..20u64 {
            let n = rng.gen_range(2..20);
            for t in 0..n {
                events.push(Event {
                    user,
                    item: rng.gen_range(0..50),
                    behavior: 3, // all targets so nobody is excluded
                    timestamp: t,
                });
            }
        }
        events.sort_by_key(|e| (e.user, e.timestamp));
        let stats = DatasetStats::build(&events, 4);
        let j = 8;
        let built = build_sequences(&events, &stats, j, 3).unwrap();
        // Oracle: independent recount of per-user event totals.
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for e in &events {
            *counts.entry(e.user).or_default() += 1;
        }
        for (user, seq) in &built.sequences {
            let real = seq.attention_mask().iter().filter(|m| **m).count();
            assert_eq!(real, counts[user].min(j));
        }
    }

    #[test]
    fn train_mask_hits_every_target_position() {
        // behaviors: pv, buy, cart, buy
        let s = seq_of(&[(1, 0), (2, 3), (3, 2), (4, 3)], 4);
        let masked = apply_cloze_mask(&s, 3, MaskMode::Train).unwrap();
        let positions: Vec<usize> = masked.masked_positions().iter().map(|(p, _)| *p).collect();
        assert_eq!(positions, vec![1, 3]);
        // Labels record the hidden items.
        assert_eq!(masked.masked_positions()[0].1, 2);
        assert_eq!(masked.masked_positions()[1].1, 4);
    }

    #[test]
    fn eval_mask_hits_only_final_target() {
        let s = seq_of(&[(1, 0), (2, 3), (3, 2), (4, 3)], 4);
        let masked = apply_cloze_mask(&s, 3, MaskMode::Eval).unwrap();
        let positions: Vec<usize> = masked.masked_positions().iter().map(|(p, _)| *p).collect();
        assert_eq!(positions, vec![3]);
    }

    #[test]
    fn all_target_sequence_masks_everything() {
        let s = seq_of(&[(7, 3), (8, 3), (9, 3)], 3);
        let masked = apply_cloze_mask(&s, 3, MaskMode::Train).unwrap();
        let labels: Vec<u32> = masked.masked_positions().iter().map(|(_, l)| *l).collect();
        assert_eq!(labels, vec![7, 8, 9]);
    }

    #[test]
    fn sequence_without_target_signals_skip() {
        let s = seq_of(&[(1, 0), (2, 2)], 4);
        assert!(apply_cloze_mask(&s, 3, MaskMode::Train).is_none());
        assert!(apply_cloze_mask(&s, 3, MaskMode::Eval).is_none());
    }

    #[test]
    fn mask_token_never_equals_true_label_input() {
        // No label leakage: the encoder sees MASK_TOKEN, not the item.
        let s = seq_of(&[(5, 3), (6, 3)], 2);
        let masked = apply_cloze_mask(&s, 3, MaskMode::Train).unwrap();
        let tokens = masked.item_tokens();
        for (pos, label) in masked.masked_positions() {
            assert_eq!(tokens[pos], MASK_TOKEN);
            assert_ne!(tokens[pos], label as usize + RESERVED_TOKENS);
        }
    }

    #[test]
    fn split_masks_last_and_second_to_last_targets() {
        // buys at positions 3 and 7 (0-based 2 and 6).
        let s = seq_of(
            &[(1, 0), (2, 0), (3, 3), (4, 0), (5, 0), (6, 0), (7, 3), (8, 0)],
            8,
        );
        let mut map = BTreeMap::new();
        map.insert(9u64, s);
        let splits = split_leave_one_out(&map, 3);
        let test_pos: Vec<usize> =
            splits.test[&9].masked_positions().iter().map(|(p, _)| *p).collect();
        assert_eq!(test_pos, vec![6]);
        assert_eq!(splits.test[&9].masked_positions()[0].1, 7);
        // Valid drops the last buy and masks the previous one.
        let valid = &splits.valid[&9];
        assert_eq!(valid.masked_positions().len(), 1);
        assert_eq!(valid.masked_positions()[0].1, 3);
        assert!(valid.pad_prefix_ok());
        // Train has no masked positions left (only two buys) but keeps context.
        let train = &splits.train[&9];
        assert!(train.masked_positions().is_empty());
        assert!(train.pad_prefix_ok());
    }

    #[test]
    fn split_target_counts_reconcile_with_recount_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut map = BTreeMap::new();
        for user in 0..30u64 {
            let n = rng.gen_range(4..12);
            let events: Vec<(u32, u8)> = (0..n)
                .map(|_| (rng.gen_range(0..40), if rng.gen_bool(0.5) { 3 } else { 0 }))
                .collect();
            let seq = BehaviorSequence::from_events(&events, 12);
            if seq.count_behavior(3) >= 2 {
                map.insert(user, seq);
            }
        }
        let splits = split_leave_one_out(&map, 3);
        for (user, seq) in &map {
            let buys = seq.count_behavior(3);
            let test_masks = splits.test[user].masked_positions().len();
            let valid_masks = splits.valid[user].masked_positions().len();
            let train_masks =
                splits.train.get(user).map_or(0, |s| s.masked_positions().len());
            assert_eq!(test_masks, 1);
            assert_eq!(valid_masks, 1);
            assert_eq!(train_masks, buys - 2, "user {user}");
        }
    }

    #[test]
    fn negatives_exhaust_small_catalog_with_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let freq = vec![5u64, 5, 5]; // catalog of 3
        let s = sample_negatives(0, 1, 100, &freq, &mut rng);
        assert_eq!(s.candidates.len(), 2);
        assert!(s.truncated);
        assert!(!s.candidates.contains(&1));
    }

    #[test]
    fn negatives_are_deterministic_given_seed() {
        let freq: Vec<u64> = (1..=50).collect();
        let a = sample_negatives(3, 7, 10, &freq, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_negatives(3, 7, 10, &freq, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a.candidates, b.candidates);
    }

    #[test]
    fn uniform_frequencies_draw_uniformly_chi_squared() {
        // 20-item pool (truth excluded from a 21-item catalog), 2e4
        // samples of 5 -> 1e5 draws.
        let freq = vec![3u64; 21];
        let truth = 20u32;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0u64; 20];
        let samples = 20_000;
        for _ in 0..samples {
            for c in sample_negatives(0, truth, 5, &freq, &mut rng).candidates {
                counts[c as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        assert_eq!(total, samples * 5);
        let expected = total as f64 / 20.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // p > 0.01 for df = 19 means chi2 below the 0.99 quantile.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let critical = ChiSquared::new(19.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < critical, "chi2 = {chi2}, critical = {critical}");
    }

    #[test]
    fn dominant_item_appears_in_nearly_all_samples() {
        // One item holds 99% of interactions.
        let mut freq = vec![1u64; 50];
        freq[0] = 4851; // 4851 / (4851 + 49) = 0.99
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut hits = 0;
        let draws = 1000;
        for _ in 0..draws {
            let s = sample_negatives(0, 49, 5, &freq, &mut rng);
            if s.candidates.contains(&0) {
                hits += 1;
            }
        }
        assert!(hits as f64 / draws as f64 >= 0.95, "hit rate {}", hits as f64 / draws as f64);
    }

    proptest::proptest! {
        #[test]
        fn pad_prefix_property_holds_for_all_built_sequences(
            n in 0usize..20, j in 2usize..16, seed in 0u64..500
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let events: Vec<(u32, u8)> =
                (0..n).map(|_| (rng.gen_range(0..30), rng.gen_range(0..4))).collect();
            let seq = BehaviorSequence::from_events(&events, j);
            proptest::prop_assert!(seq.pad_prefix_ok());
            proptest::prop_assert_eq!(seq.len(), j);
            // attention mask false exactly at PAD
            let mask = seq.attention_mask();
            for (i, slot) in seq.slots().iter().enumerate() {
                proptest::prop_assert_eq!(mask[i], !matches!(slot, Slot::Pad));
            }
            if let Some(masked) = apply_cloze_mask(&seq, 3, MaskMode::Train) {
                proptest::prop_assert!(masked.pad_prefix_ok());
            }
        }
    }
}
