//! Token-sequence state for masked diffusion decoding.
//!
//! Holds the vocabulary/mask convention, the partially decoded [`Canvas`],
//! the forward masking process used to build corrupted sequences, and the
//! transfer policies that choose which masked positions are committed at
//! each reverse step.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::MarginVector;

/// Opaque token identifier. Real tokens live in `[0, vocab.size)`.
pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("masking rate beta[{index}] = {value} is outside [0, 1)")]
    InvalidBeta { index: usize, value: f64 },
    #[error("step {t} is out of range [0, {max}]")]
    StepOutOfRange { t: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid transfer policy: {0}")]
    InvalidPolicy(String),
}

/// Real-token count plus the reserved mask placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: u32,
    mask_id: TokenId,
}

impl Vocabulary {
    pub fn new(size: u32, mask_id: TokenId) -> Result<Self, DiffusionError> {
        if size < 2 {
            return Err(DiffusionError::InvalidVocabulary(format!(
                "size must be at least 2, got {size}"
            )));
        }
        if mask_id < size {
            return Err(DiffusionError::InvalidVocabulary(format!(
                "mask id {mask_id} collides with real token range [0, {size})"
            )));
        }
        Ok(Self { size, mask_id })
    }

    /// Vocabulary whose mask id is the first id past the real tokens.
    pub fn with_trailing_mask(size: u32) -> Result<Self, DiffusionError> {
        Self::new(size, size)
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn is_real(&self, token: TokenId) -> bool {
        token < self.size
    }
}

/// Ordered, non-empty set of generation-region indices over which
/// confidence (and entropy) is aggregated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct AnswerRegion {
    positions: Vec<usize>,
}

impl AnswerRegion {
    /// The whole generation region `[0, gen_len)`.
    pub fn full(gen_len: usize) -> Result<Self, DiffusionError> {
        Self::from_positions(0..gen_len)
    }

    pub fn from_positions<I: IntoIterator<Item = usize>>(
        positions: I,
    ) -> Result<Self, DiffusionError> {
        let positions: Vec<usize> = positions
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if positions.is_empty() {
            return Err(DiffusionError::InvalidInput(
                "answer region must not be empty".into(),
            ));
        }
        Ok(Self { positions })
    }

    /// Checks that every index lies inside a generation region of `gen_len`.
    pub fn check_within(&self, gen_len: usize) -> Result<(), DiffusionError> {
        match self.positions.last() {
            Some(&last) if last >= gen_len => Err(DiffusionError::InvalidInput(format!(
                "answer region index {last} outside generation length {gen_len}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

impl TryFrom<Vec<usize>> for AnswerRegion {
    type Error = DiffusionError;

    fn try_from(value: Vec<usize>) -> Result<Self, Self::Error> {
        Self::from_positions(value)
    }
}

impl From<AnswerRegion> for Vec<usize> {
    fn from(value: AnswerRegion) -> Self {
        value.positions
    }
}

/// The partially decoded sequence: an immutable prompt followed by the
/// generation region, where unresolved slots hold the vocabulary's mask id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canvas {
    vocab: Vocabulary,
    prompt: Vec<TokenId>,
    gen: Vec<TokenId>,
    step: usize,
    budget: usize,
}

impl Canvas {
    /// Prompt followed by `gen_len` mask tokens, at step 0.
    pub fn new(
        vocab: Vocabulary,
        prompt: Vec<TokenId>,
        gen_len: usize,
        budget: usize,
    ) -> Result<Self, DiffusionError> {
        if gen_len == 0 {
            return Err(DiffusionError::InvalidInput(
                "generation length must be positive".into(),
            ));
        }
        if budget == 0 {
            return Err(DiffusionError::InvalidInput(
                "step budget must be positive".into(),
            ));
        }
        if let Some(bad) = prompt.iter().find(|&&tok| !vocab.is_real(tok)) {
            return Err(DiffusionError::InvalidInput(format!(
                "prompt token {bad} is not a real token"
            )));
        }
        Ok(Self {
            vocab,
            prompt,
            gen: vec![vocab.mask_id(); gen_len],
            step: 0,
            budget,
        })
    }

    /// Builds a canvas from an existing generation region (mask ids allowed).
    pub fn from_parts(
        vocab: Vocabulary,
        prompt: Vec<TokenId>,
        gen: Vec<TokenId>,
        step: usize,
        budget: usize,
    ) -> Result<Self, DiffusionError> {
        let mut canvas = Self::new(vocab, prompt, gen.len(), budget)?;
        if step > budget {
            return Err(DiffusionError::StepOutOfRange {
                t: step,
                max: budget,
            });
        }
        if let Some(bad) = gen
            .iter()
            .find(|&&tok| tok != vocab.mask_id() && !vocab.is_real(tok))
        {
            return Err(DiffusionError::InvalidInput(format!(
                "generation token {bad} is neither real nor the mask"
            )));
        }
        canvas.gen = gen;
        canvas.step = step;
        Ok(canvas)
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn gen(&self) -> &[TokenId] {
        &self.gen
    }

    pub fn gen_len(&self) -> usize {
        self.gen.len()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.gen.get(pos) == Some(&self.vocab.mask_id())
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.gen.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.gen
            .iter()
            .filter(|&&tok| tok == self.vocab.mask_id())
            .count()
    }

    /// Fraction of generation positions already holding a real token.
    pub fn unmasked_fraction(&self) -> f64 {
        1.0 - self.masked_count() as f64 / self.gen.len() as f64
    }

    pub fn set_step(&mut self, step: usize) -> Result<(), DiffusionError> {
        if step > self.budget {
            return Err(DiffusionError::StepOutOfRange {
                t: step,
                max: self.budget,
            });
        }
        self.step = step;
        Ok(())
    }

    /// Writes a real token into a masked slot. Committed slots are final.
    pub fn commit(&mut self, pos: usize, token: TokenId) -> Result<(), DiffusionError> {
        if !self.vocab.is_real(token) {
            return Err(DiffusionError::Contract(format!(
                "cannot commit non-real token {token} at position {pos}"
            )));
        }
        if !self.is_masked(pos) {
            return Err(DiffusionError::Contract(format!(
                "position {pos} is not masked"
            )));
        }
        self.gen[pos] = token;
        Ok(())
    }

    pub fn into_gen(self) -> Vec<TokenId> {
        self.gen
    }
}

/// Forward corruption process with per-step masking rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MaskingProcess {
    betas: Vec<f64>,
}

impl MaskingProcess {
    pub fn new(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        for (index, &value) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(&value) {
                return Err(DiffusionError::InvalidBeta { index, value });
            }
        }
        Ok(Self { betas })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Number of forward steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Probability that a token survives `t` forward steps unmasked.
    pub fn survival_probability(&self, t: usize) -> Result<f64, DiffusionError> {
        if t > self.betas.len() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                max: self.betas.len(),
            });
        }
        Ok(self.betas[..t].iter().map(|b| 1.0 - b).product())
    }

    /// Samples `x_t ~ q(x_t | x_0)` position-wise from the closed-form marginal.
    pub fn corrupt(
        &self,
        clean: &[TokenId],
        vocab: Vocabulary,
        t: usize,
        seed: u64,
    ) -> Result<Vec<TokenId>, DiffusionError> {
        let survival = self.survival_probability(t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mask_with_survival(clean, vocab, survival, &mut rng)
    }
}

impl TryFrom<Vec<f64>> for MaskingProcess {
    type Error = DiffusionError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<MaskingProcess> for Vec<f64> {
    fn from(value: MaskingProcess) -> Self {
        value.betas
    }
}

/// Keeps each token independently with probability `survival`, masking it
/// otherwise.
pub fn mask_with_survival<R: Rng + ?Sized>(
    clean: &[TokenId],
    vocab: Vocabulary,
    survival: f64,
    rng: &mut R,
) -> Result<Vec<TokenId>, DiffusionError> {
    if !(0.0..=1.0).contains(&survival) {
        return Err(DiffusionError::InvalidInput(format!(
            "survival probability {survival} outside [0, 1]"
        )));
    }
    if let Some(pos) = clean.iter().position(|&tok| tok == vocab.mask_id()) {
        return Err(DiffusionError::InvalidInput(format!(
            "clean sequence already contains the mask at position {pos}"
        )));
    }
    Ok(clean
        .iter()
        .map(|&tok| {
            // Draw for every position so the stream does not depend on survival.
            let u: f64 = rng.random();
            if u < survival {
                tok
            } else {
                vocab.mask_id()
            }
        })
        .collect())
}

/// Selection rule applied to the masked positions of one (block of a) canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasePolicy {
    /// Every masked position.
    FullSuffix,
    /// The `per_step` lowest-indexed masked positions.
    FixedCount { per_step: usize },
    /// The `per_step` masked positions with the largest margins.
    LowConfidenceTopK { per_step: usize },
}

/// Transfer schedule: which masked positions get committed at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferPolicy {
    FullSuffix,
    FixedCount {
        per_step: usize,
    },
    LowConfidenceTopK {
        per_step: usize,
    },
    /// Left-to-right blocks; `inner` is applied inside the lowest block that
    /// still holds a mask.
    BlockDiffusion {
        block_size: usize,
        inner: BasePolicy,
    },
}

impl TransferPolicy {
    /// `FixedCount` with `ceil(gen_len / budget)` commits per step, which
    /// exhausts the masks exactly by the last step.
    pub fn fixed_count_for(gen_len: usize, budget: usize) -> Self {
        TransferPolicy::FixedCount {
            per_step: gen_len.div_ceil(budget.max(1)).max(1),
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        match *self {
            TransferPolicy::FullSuffix => Ok(()),
            TransferPolicy::FixedCount { per_step }
            | TransferPolicy::LowConfidenceTopK { per_step } => check_per_step(per_step),
            TransferPolicy::BlockDiffusion { block_size, inner } => {
                if block_size == 0 {
                    return Err(DiffusionError::InvalidPolicy(
                        "block_size must be at least 1".into(),
                    ));
                }
                BasePolicy::validate(&inner)
            }
        }
    }
}

impl BasePolicy {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        match *self {
            BasePolicy::FullSuffix => Ok(()),
            BasePolicy::FixedCount { per_step } | BasePolicy::LowConfidenceTopK { per_step } => {
                check_per_step(per_step)
            }
        }
    }

    fn apply(&self, candidates: &[usize], confidence: &MarginVector) -> Vec<usize> {
        match *self {
            BasePolicy::FullSuffix => candidates.to_vec(),
            BasePolicy::FixedCount { per_step } => {
                candidates.iter().copied().take(per_step).collect()
            }
            BasePolicy::LowConfidenceTopK { per_step } => {
                let mut ranked: Vec<(usize, f64)> = candidates
                    .iter()
                    .map(|&pos| (pos, confidence.get(pos).unwrap_or(0.0)))
                    .collect();
                // Highest margin first, ties broken by lowest index.
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut chosen: Vec<usize> = ranked
                    .into_iter()
                    .take(per_step)
                    .map(|(pos, _)| pos)
                    .collect();
                chosen.sort_unstable();
                chosen
            }
        }
    }
}

impl From<BasePolicy> for TransferPolicy {
    fn from(value: BasePolicy) -> Self {
        match value {
            BasePolicy::FullSuffix => TransferPolicy::FullSuffix,
            BasePolicy::FixedCount { per_step } => TransferPolicy::FixedCount { per_step },
            BasePolicy::LowConfidenceTopK { per_step } => {
                TransferPolicy::LowConfidenceTopK { per_step }
            }
        }
    }
}

fn check_per_step(per_step: usize) -> Result<(), DiffusionError> {
    if per_step == 0 {
        Err(DiffusionError::InvalidPolicy(
            "per_step must be at least 1".into(),
        ))
    } else {
        Ok(())
    }
}

/// Chooses the masked positions to commit this step, returned in ascending
/// order. `confidence` must carry a margin for every masked position.
pub fn select_positions(
    policy: &TransferPolicy,
    canvas: &Canvas,
    confidence: &MarginVector,
) -> Result<Vec<usize>, DiffusionError> {
    policy.validate()?;
    let masked = canvas.masked_positions();
    if let Some(&missing) = masked.iter().find(|&&pos| confidence.get(pos).is_none()) {
        return Err(DiffusionError::Contract(format!(
            "no confidence supplied for masked position {missing}"
        )));
    }
    if masked.is_empty() {
        return Ok(Vec::new());
    }
    let chosen = match *policy {
        TransferPolicy::BlockDiffusion { block_size, inner } => {
            let active_block = masked[0] / block_size;
            let candidates: Vec<usize> = masked
                .iter()
                .copied()
                .take_while(|&pos| pos / block_size == active_block)
                .collect();
            inner.apply(&candidates, confidence)
        }
        TransferPolicy::FullSuffix => BasePolicy::FullSuffix.apply(&masked, confidence),
        TransferPolicy::FixedCount { per_step } => {
            BasePolicy::FixedCount { per_step }.apply(&masked, confidence)
        }
        TransferPolicy::LowConfidenceTopK { per_step } => {
            BasePolicy::LowConfidenceTopK { per_step }.apply(&masked, confidence)
        }
    };
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_trailing_mask(10).unwrap()
    }

    fn margins(entries: &[(usize, f64)]) -> MarginVector {
        MarginVector::from_entries(entries.iter().copied()).unwrap()
    }

    fn canvas_with(gen: Vec<TokenId>) -> Canvas {
        let len = gen.len();
        Canvas::from_parts(vocab(), vec![1, 2], gen, 0, len.max(1)).unwrap()
    }

    #[test]
    fn vocabulary_rejects_small_or_colliding() {
        assert!(Vocabulary::new(1, 5).is_err());
        assert!(Vocabulary::new(10, 3).is_err());
        assert!(Vocabulary::new(10, 10).is_ok());
    }

    #[test]
    fn survival_examples() {
        let p = MaskingProcess::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(p.survival_probability(2).unwrap(), 0.25);
        assert_eq!(p.survival_probability(0).unwrap(), 1.0);
        assert!(matches!(
            p.survival_probability(3),
            Err(DiffusionError::StepOutOfRange { t: 3, max: 2 })
        ));

        let p = MaskingProcess::new(vec![0.1, 0.2, 0.3]).unwrap();
        let expected = 0.9 * 0.8 * 0.7;
        assert!((p.survival_probability(3).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.504_f64).abs() < 1e-12);
    }

    #[test]
    fn betas_validated() {
        assert!(MaskingProcess::new(vec![0.2, 1.0]).is_err());
        assert!(MaskingProcess::new(vec![-0.1]).is_err());
        assert!(MaskingProcess::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn corrupt_at_zero_is_identity() {
        let p = MaskingProcess::new(vec![0.9; 4]).unwrap();
        let clean: Vec<TokenId> = (0..50).map(|i| i % 10).collect();
        assert_eq!(p.corrupt(&clean, vocab(), 0, 7).unwrap(), clean);
    }

    #[test]
    fn corrupt_zero_survival_masks_everything() {
        let clean: Vec<TokenId> = (0..200).map(|i| i % 10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = mask_with_survival(&clean, vocab(), 0.0, &mut rng).unwrap();
        assert!(out.iter().all(|&t| t == vocab().mask_id()));

        let p = MaskingProcess::new(vec![0.999; 64]).unwrap();
        let out = p.corrupt(&clean, vocab(), 64, 11).unwrap();
        assert!(out.iter().all(|&t| t == vocab().mask_id()));
    }

    #[test]
    fn corrupt_rejects_masked_input() {
        let p = MaskingProcess::new(vec![0.5]).unwrap();
        let err = p.corrupt(&[1, 10, 2], vocab(), 1, 0).unwrap_err();
        assert!(matches!(err, DiffusionError::InvalidInput(_)));
    }

    #[test]
    fn corrupt_half_rate_within_three_standard_errors() {
        let p = MaskingProcess::new(vec![0.5]).unwrap();
        let clean: Vec<TokenId> = vec![3; 10_000];
        let out = p.corrupt(&clean, vocab(), 1, 2024).unwrap();
        let frac = out.iter().filter(|&&t| t == vocab().mask_id()).count() as f64 / 10_000.0;
        let se = (0.5_f64 * 0.5 / 10_000.0).sqrt();
        assert!((frac - 0.5).abs() <= 3.0 * se, "mask fraction {frac}");
    }

    #[test]
    fn corrupt_is_seed_deterministic() {
        let p = MaskingProcess::new(vec![0.3, 0.3]).unwrap();
        let clean: Vec<TokenId> = (0..100).map(|i| i % 10).collect();
        assert_eq!(
            p.corrupt(&clean, vocab(), 2, 5).unwrap(),
            p.corrupt(&clean, vocab(), 2, 5).unwrap()
        );
    }

    #[test]
    fn full_suffix_selects_all_masked() {
        let m = vocab().mask_id();
        let canvas = canvas_with(vec![1, 2, 3, 4, m, m, m]);
        let conf = margins(&[(4, 0.1), (5, 0.2), (6, 0.3)]);
        assert_eq!(
            select_positions(&TransferPolicy::FullSuffix, &canvas, &conf).unwrap(),
            vec![4, 5, 6]
        );
    }

    #[test]
    fn top_k_picks_highest_margin() {
        let m = vocab().mask_id();
        let canvas = canvas_with(vec![1, 2, 3, 4, m, m, m]);
        let conf = margins(&[(4, 1.0), (5, 3.0), (6, 2.0)]);
        let policy = TransferPolicy::LowConfidenceTopK { per_step: 1 };
        assert_eq!(select_positions(&policy, &canvas, &conf).unwrap(), vec![5]);
    }

    #[test]
    fn top_k_ties_break_to_lowest_index() {
        let m = vocab().mask_id();
        let canvas = canvas_with(vec![m, m, m]);
        let conf = margins(&[(0, 1.0), (1, 2.0), (2, 2.0)]);
        let policy = TransferPolicy::LowConfidenceTopK { per_step: 1 };
        assert_eq!(select_positions(&policy, &canvas, &conf).unwrap(), vec![1]);
    }

    #[test]
    fn block_restricts_to_lowest_unfinished_block() {
        let m = vocab().mask_id();
        let canvas = canvas_with(vec![1, 2, m, m]);
        let conf = margins(&[(2, 1.0), (3, 1.0)]);
        let policy = TransferPolicy::BlockDiffusion {
            block_size: 2,
            inner: BasePolicy::FullSuffix,
        };
        assert_eq!(
            select_positions(&policy, &canvas, &conf).unwrap(),
            vec![2, 3]
        );
    }

    #[test]
    fn fixed_count_takes_leftmost() {
        let m = vocab().mask_id();
        let canvas = canvas_with(vec![m, 1, m, m, m]);
        let conf = margins(&[(0, 0.0), (2, 9.0), (3, 9.0), (4, 9.0)]);
        let policy = TransferPolicy::FixedCount { per_step: 2 };
        assert_eq!(
            select_positions(&policy, &canvas, &conf).unwrap(),
            vec![0, 2]
        );
        let policy = TransferPolicy::FixedCount { per_step: 99 };
        assert_eq!(
            select_positions(&policy, &canvas, &conf).unwrap(),
            vec![0, 2, 3, 4]
        );
    }

    #[test]
    fn missing_confidence_is_contract_error() {
        let m = vocab().mask_id();
        let canvas = canvas_with(vec![m, m]);
        let conf = margins(&[(0, 1.0)]);
        let err = select_positions(&TransferPolicy::FullSuffix, &canvas, &conf).unwrap_err();
        assert!(matches!(err, DiffusionError::Contract(_)));
    }

    #[test]
    fn invalid_policies_rejected() {
        assert!(TransferPolicy::FixedCount { per_step: 0 }
            .validate()
            .is_err());
        assert!(TransferPolicy::BlockDiffusion {
            block_size: 0,
            inner: BasePolicy::FullSuffix
        }
        .validate()
        .is_err());
        assert!(TransferPolicy::BlockDiffusion {
            block_size: 4,
            inner: BasePolicy::LowConfidenceTopK { per_step: 0 }
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fixed_count_default_exhausts_budget() {
        assert_eq!(
            TransferPolicy::fixed_count_for(256, 256),
            TransferPolicy::FixedCount { per_step: 1 }
        );
        assert_eq!(
            TransferPolicy::fixed_count_for(10, 4),
            TransferPolicy::FixedCount { per_step: 3 }
        );
    }

    #[test]
    fn canvas_commit_is_one_way() {
        let mut canvas = Canvas::new(vocab(), vec![1], 3, 3).unwrap();
        canvas.commit(1, 4).unwrap();
        assert!(canvas.commit(1, 5).is_err());
        assert!(canvas.commit(0, vocab().mask_id()).is_err());
        assert_eq!(canvas.masked_positions(), vec![0, 2]);
        assert!(canvas.set_step(4).is_err());
    }

    #[test]
    fn answer_region_checks() {
        assert!(AnswerRegion::from_positions(Vec::new()).is_err());
        let r = AnswerRegion::from_positions([3, 1, 3]).unwrap();
        assert_eq!(r.positions(), &[1, 3]);
        assert!(r.check_within(4).is_ok());
        assert!(r.check_within(3).is_err());
    }

    fn policy_strategy() -> impl Strategy<Value = TransferPolicy> {
        let base = prop_oneof![
            Just(BasePolicy::FullSuffix),
            (1usize..6).prop_map(|per_step| BasePolicy::FixedCount { per_step }),
            (1usize..6).prop_map(|per_step| BasePolicy::LowConfidenceTopK { per_step }),
        ];
        prop_oneof![
            base.clone().prop_map(TransferPolicy::from),
            (1usize..8, base).prop_map(|(block_size, inner)| TransferPolicy::BlockDiffusion {
                block_size,
                inner
            }),
        ]
    }

    proptest! {
        #[test]
        fn survival_is_nonincreasing(betas in prop::collection::vec(0.0f64..0.999, 1..40)) {
            let p = MaskingProcess::new(betas.clone()).unwrap();
            let mut prev = 1.0;
            for t in 0..=betas.len() {
                let s = p.survival_probability(t).unwrap();
                prop_assert!(s <= prev);
                prop_assert!((0.0..=1.0).contains(&s));
                prev = s;
            }
        }

        #[test]
        fn selection_is_nonempty_subset_of_masked(
            mask_bits in prop::collection::vec(any::<bool>(), 1..40),
            raw_margins in prop::collection::vec(0.0f64..10.0, 40),
            policy in policy_strategy(),
        ) {
            let m = vocab().mask_id();
            let gen: Vec<TokenId> = mask_bits.iter().map(|&b| if b { m } else { 1 }).collect();
            let canvas = canvas_with(gen);
            let conf = MarginVector::from_entries(
                (0..mask_bits.len()).map(|i| (i, raw_margins[i]))
            ).unwrap();
            let chosen = select_positions(&policy, &canvas, &conf).unwrap();
            let masked = canvas.masked_positions();
            prop_assert!(chosen.iter().all(|p| masked.contains(p)));
            prop_assert_eq!(chosen.is_empty(), masked.is_empty());
            if let TransferPolicy::BlockDiffusion { block_size, .. } = policy {
                if let Some(&first) = masked.first() {
                    let active = first / block_size;
                    prop_assert!(chosen.iter().all(|&p| p / block_size == active));
                }
            }
        }

        #[test]
        fn top_k_matches_sort_and_take(
            raw in prop::collection::vec(0u8..6, 1..32),
            per_step in 1usize..10,
        ) {
            // Coarse margins force plenty of ties.
            let m = vocab().mask_id();
            let canvas = canvas_with(vec![m; raw.len()]);
            let conf = MarginVector::from_entries(
                raw.iter().enumerate().map(|(i, &v)| (i, v as f64 * 0.5))
            ).unwrap();
            let policy = TransferPolicy::LowConfidenceTopK { per_step };
            let chosen = select_positions(&policy, &canvas, &conf).unwrap();

            let mut oracle: Vec<(usize, u8)> = raw.iter().copied().enumerate().collect();
            for i in 0..oracle.len() {
                for j in 0..oracle.len() - 1 - i {
                    let (a, b) = (oracle[j], oracle[j + 1]);
                    if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                        oracle.swap(j, j + 1);
                    }
                }
            }
            let mut expected: Vec<usize> = oracle.iter().take(per_step).map(|e| e.0).collect();
            expected.sort_unstable();
            prop_assert_eq!(chosen, expected);
        }
    }
}
