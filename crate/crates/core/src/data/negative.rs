use std::collections::HashMap;

use rand::Rng;

use super::{DataError, InstructionRecord, TokenId};

fn eligible(anchor: &InstructionRecord, other: &InstructionRecord) -> bool {
    other.instruction_tokens == anchor.instruction_tokens && other.response_tokens != anchor.response_tokens
}

/// Draws a record with the anchor's exact instruction and a different
/// response, uniformly over all eligible records.
pub fn sample_negative<'a, R: Rng + ?Sized>(
    anchor: &InstructionRecord,
    dataset: &'a [InstructionRecord],
    rng: &mut R,
) -> Result<&'a InstructionRecord, DataError> {
    let pool: Vec<&InstructionRecord> = dataset.iter().filter(|r| eligible(anchor, r)).collect();
    if pool.is_empty() {
        return Err(DataError::NoValidNegative(anchor.sample_id.clone()));
    }
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Precomputed eligibility lists for repeated negative draws over one dataset.
#[derive(Clone, Debug)]
pub struct NegativeIndex {
    eligible: Vec<Vec<usize>>,
}

impl NegativeIndex {
    /// Fails if any record has no valid negative.
    pub fn new(records: &[InstructionRecord]) -> Result<Self, DataError> {
        let mut groups: HashMap<&[TokenId], Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            groups.entry(r.instruction_tokens.as_slice()).or_default().push(i);
        }
        let mut eligible = Vec::with_capacity(records.len());
        for r in records {
            let group = &groups[r.instruction_tokens.as_slice()];
            let pool: Vec<usize> =
                group.iter().copied().filter(|&j| records[j].response_tokens != r.response_tokens).collect();
            if pool.is_empty() {
                return Err(DataError::NoValidNegative(r.sample_id.clone()));
            }
            eligible.push(pool);
        }
        Ok(Self { eligible })
    }

    /// Same distribution as [`sample_negative`]: uniform over eligible records.
    pub fn draw<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> usize {
        let pool = &self.eligible[anchor];
        pool[rng.random_range(0..pool.len())]
    }

    pub fn eligible(&self, anchor: usize) -> &[usize] {
        &self.eligible[anchor]
    }
}
