//! Desk-scale task where the answer is only reachable through the latent span.
//!
//! A query is two "image" embedding rows followed by a marker and a question
//! word. Hard queries show `[A[a], B[b]]` and ask for `table[a][b]`, a
//! balanced lookup in which neither attribute alone says anything about the
//! class. The auxiliary targets for the latent span encode the class
//! directly, so a model that learns to predict them and read them back
//! answers correctly. Easy queries show `[E[c], B[b]]`, which the simulated
//! base model already solves; they are routed to text-only supervision.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::example::{
    embedding_bytes, image_hash, question_hash, Accuracy, ExampleMetadata, SupervisionMode, TrainingExample,
};
use super::format::{is_square_budget, LatentSpan, ResponseSegments};
use super::supervision::{estimate_accuracy, route, AnswerSampler};
use super::tokens::{TokenId, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::numerics::{dot, gaussian_vec, Rng};

pub const LOOK: TokenId = RESERVED_TOKENS as TokenId;
pub const SO: TokenId = LOOK + 1;
pub const PARSER_WORDS: [TokenId; 3] = [LOOK + 2, LOOK + 3, LOOK + 4];
pub const MARK_HARD: TokenId = LOOK + 5;
pub const MARK_EASY: TokenId = LOOK + 6;
pub const Q_WORD: TokenId = LOOK + 7;
pub const FIRST_CLASS: TokenId = LOOK + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub d_model: usize,
    pub n_values: usize,
    pub n_classes: usize,
    pub budget: usize,
    /// Fraction of hard (latent-necessary) queries.
    pub hard_fraction: f64,
    pub class_scale: f64,
    pub offset_scale: f64,
    pub center_scale: f64,
    pub target_noise: f64,
    pub image_jitter: f64,
    /// Per-attempt success probability of the simulated base model.
    pub easy_accuracy: f64,
    pub hard_accuracy: f64,
    pub attempts: u32,
    pub tau: f64,
    /// Seeds the fixed task structure shared by every split.
    pub task_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_values: 4,
            n_classes: 4,
            budget: 4,
            hard_fraction: 0.5,
            class_scale: 6.0,
            offset_scale: 2.0,
            center_scale: 4.0,
            target_noise: 0.05,
            image_jitter: 0.01,
            easy_accuracy: 0.9,
            hard_accuracy: 0.0,
            attempts: 8,
            tau: 0.0,
            task_seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.d_model == 0 || self.n_values == 0 || self.n_classes < 2 {
            return bad("synthetic task needs d_model >= 1, n_values >= 1, n_classes >= 2");
        }
        if !is_square_budget(self.budget) {
            return Err(Error::BudgetNotSquare(self.budget));
        }
        for (name, p) in [
            ("hard_fraction", self.hard_fraction),
            ("easy_accuracy", self.easy_accuracy),
            ("hard_accuracy", self.hard_accuracy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.attempts == 0 {
            return bad("attempts must be >= 1");
        }
        Ok(())
    }
}

/// Fixed structure of the task: image vocabularies, lookup table and target geometry.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    image_a: Vec<Vec<f64>>,
    image_b: Vec<Vec<f64>>,
    image_e: Vec<Vec<f64>>,
    table: Vec<Vec<usize>>,
    center: Vec<f64>,
    offsets: Vec<Vec<f64>>,
    class_vecs: Vec<Vec<f64>>,
    centroids: Vec<Vec<f64>>,
}

fn scaled_direction(rng: &mut Rng, d: usize, norm: f64) -> Vec<f64> {
    let v = gaussian_vec(rng, d, 1.0).expect("d >= 1");
    let s = norm / crate::numerics::l2(&v);
    v.into_iter().map(|x| x * s).collect()
}

impl SyntheticTask {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.task_seed);
        let d = config.d_model;
        let m = config.n_classes;
        let image = |rng: &mut Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| gaussian_vec(rng, d, 1.0).expect("d >= 1")).collect()
        };
        let image_a = image(&mut rng, config.n_values);
        let image_b = image(&mut rng, config.n_values);
        let image_e = image(&mut rng, m);

        // table[a][b] = perm[(ra[a] + rb[b]) mod m]: every row and column is balanced.
        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let mut ra: Vec<usize> = (0..config.n_values).map(|i| i % m).collect();
        rng.shuffle(&mut ra);
        let mut rb: Vec<usize> = (0..config.n_values).map(|i| i % m).collect();
        rng.shuffle(&mut rb);
        let table = ra
            .iter()
            .map(|&x| rb.iter().map(|&y| perm[(x + y) % m]).collect())
            .collect();

        let center = scaled_direction(&mut rng, d, config.center_scale);
        let offsets: Vec<Vec<f64>> = (0..config.budget)
            .map(|_| scaled_direction(&mut rng, d, config.offset_scale))
            .collect();
        let class_vecs: Vec<Vec<f64>> = (0..m)
            .map(|_| scaled_direction(&mut rng, d, config.class_scale))
            .collect();
        let mut mean_offset = vec![0.0; d];
        for o in &offsets {
            crate::numerics::axpy(1.0 / offsets.len() as f64, o, &mut mean_offset);
        }
        let centroids = class_vecs
            .iter()
            .map(|cv| (0..d).map(|j| center[j] + mean_offset[j] + cv[j]).collect())
            .collect();
        Ok(Self {
            config,
            image_a,
            image_b,
            image_e,
            table,
            center,
            offsets,
            class_vecs,
            centroids,
        })
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_CLASS as usize + self.config.n_classes
    }

    pub fn class_token(&self, class: usize) -> TokenId {
        FIRST_CLASS + class as TokenId
    }

    pub fn token_class(&self, token: TokenId) -> Option<usize> {
        let c = token.checked_sub(FIRST_CLASS)? as usize;
        (c < self.config.n_classes).then_some(c)
    }

    pub fn lookup(&self, a: usize, b: usize) -> usize {
        self.table[a][b]
    }

    /// Nearest class centroid to the mean target vector.
    pub fn answer_from_targets(&self, targets: &[Vec<f64>]) -> Result<usize> {
        let d = self.config.d_model;
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no targets".into()));
        }
        let mut mean = vec![0.0; d];
        for t in targets {
            crate::error::ensure_dim("answer_from_targets", d, t.len())?;
            crate::numerics::axpy(1.0 / targets.len() as f64, t, &mut mean);
        }
        let dist = |c: &Vec<f64>| {
            let diff: Vec<f64> = mean.iter().zip(c).map(|(a, b)| a - b).collect();
            dot(&diff, &diff)
        };
        let mut best = 0;
        for c in 1..self.centroids.len() {
            if dist(&self.centroids[c]) < dist(&self.centroids[best]) {
                best = c;
            }
        }
        Ok(best)
    }

    fn targets(&self, rng: &mut Rng, class: usize) -> Vec<Vec<f64>> {
        let d = self.config.d_model;
        self.offsets
            .iter()
            .map(|off| {
                (0..d)
                    .map(|j| {
                        self.center[j]
                            + off[j]
                            + self.class_vecs[class][j]
                            + self.config.target_noise * rng.normal()
                    })
                    .collect()
            })
            .collect()
    }

    fn jittered(&self, rng: &mut Rng, row: &[f64]) -> Vec<f64> {
        row.iter()
            .map(|x| x + self.config.image_jitter * rng.normal())
            .collect()
    }

    /// One example in latent form, before difficulty routing.
    pub fn sample(&self, rng: &mut Rng, index: usize) -> Result<TrainingExample> {
        let cfg = &self.config;
        let hard = rng.bernoulli(cfg.hard_fraction);
        let b = rng.below(cfg.n_values);
        let (image, mark, class, source_id) = if hard {
            let a = rng.below(cfg.n_values);
            let c = self.lookup(a, b);
            (
                vec![self.jittered(rng, &self.image_a[a]), self.jittered(rng, &self.image_b[b])],
                MARK_HARD,
                c,
                format!("hard-{index}-{:016x}", rng.next_u64()),
            )
        } else {
            let c = rng.below(cfg.n_classes);
            (
                vec![self.jittered(rng, &self.image_e[c]), self.jittered(rng, &self.image_b[b])],
                MARK_EASY,
                c,
                format!("easy-{index}-{:016x}", rng.next_u64()),
            )
        };
        let targets = self.targets(rng, class);
        // The label is read off the targets so it is their function by construction.
        let label = self.answer_from_targets(&targets)?;
        let question = format!("{} which class does this pair show {source_id}", if hard { "hard" } else { "easy" });
        Ok(TrainingExample {
            metadata: ExampleMetadata {
                image_hash: Some(image_hash(&embedding_bytes(&image))),
                question_hash: Some(question_hash(&question)),
                source_id,
            },
            query_image: image,
            query_tokens: vec![mark, Q_WORD],
            segments: ResponseSegments {
                think_prefix: vec![LOOK],
                latent: Some(LatentSpan {
                    budget: cfg.budget,
                    targets: Some(targets),
                }),
                parser_text: PARSER_WORDS.to_vec(),
                think_suffix: vec![SO],
                answer: vec![self.class_token(label)],
            },
            accuracy: Accuracy::new(0, cfg.attempts),
            mode: SupervisionMode::Latent,
        })
    }

    /// `count` examples with estimated base accuracy and routed supervision.
    pub fn generate(&self, rng: &mut Rng, count: usize) -> Result<Vec<TrainingExample>> {
        let sampler = SimulatedBase::new(&self.config);
        let seed = rng.next_u64();
        (0..count)
            .map(|i| {
                let mut ex = self.sample(rng, i)?;
                ex.accuracy = estimate_accuracy(&sampler, &ex, self.config.attempts, seed)?;
                Ok(route(ex, self.config.tau))
            })
            .collect()
    }
}

/// Stand-in for the base model's answer attempts: succeeds with a fixed
/// probability that depends only on the query marker.
#[derive(Debug, Clone, Copy)]
pub struct SimulatedBase {
    pub easy_accuracy: f64,
    pub hard_accuracy: f64,
}

impl SimulatedBase {
    pub fn new(config: &SyntheticConfig) -> Self {
        Self {
            easy_accuracy: config.easy_accuracy,
            hard_accuracy: config.hard_accuracy,
        }
    }
}

impl AnswerSampler for SimulatedBase {
    fn attempt(&self, example: &TrainingExample, attempt: u32, seed: u64) -> std::result::Result<bool, String> {
        let p = match example.query_tokens.first() {
            Some(&MARK_HARD) => self.hard_accuracy,
            Some(&MARK_EASY) => self.easy_accuracy,
            _ => return Err("query has no difficulty marker".into()),
        };
        let digest = Sha256::digest(example.metadata.source_id.as_bytes());
        let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = Rng::derive(seed ^ key, u64::from(attempt));
        Ok(rng.bernoulli(p))
    }
}

pub fn gen_synthetic_task(rng: &mut Rng, count: usize, config: &SyntheticConfig) -> Result<Vec<TrainingExample>> {
    SyntheticTask::new(config.clone())?.generate(rng, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokens::LATENT_FORMAT_TOKENS;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig::default();
        let a = gen_synthetic_task(&mut Rng::new(5), 50, &cfg).unwrap();
        let b = gen_synthetic_task(&mut Rng::new(5), 50, &cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_task(&mut Rng::new(6), 50, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labels_follow_targets_and_table() {
        let task = SyntheticTask::new(SyntheticConfig::default()).unwrap();
        let mut rng = Rng::new(1);
        for i in 0..200 {
            let ex = task.sample(&mut rng, i).unwrap();
            let label = task.answer_from_targets(ex.latent_targets().unwrap()).unwrap();
            assert_eq!(ex.segments.answer, vec![task.class_token(label)]);
        }
    }

    #[test]
    fn table_is_balanced() {
        let task = SyntheticTask::new(SyntheticConfig::default()).unwrap();
        let m = task.config.n_classes;
        for a in 0..task.config.n_values {
            let mut seen = vec![0; m];
            for b in 0..task.config.n_values {
                seen[task.lookup(a, b)] += 1;
            }
            assert!(seen.iter().all(|&s| s == 1), "row {a}: {seen:?}");
        }
        for b in 0..task.config.n_values {
            let mut seen = vec![0; m];
            for a in 0..task.config.n_values {
                seen[task.lookup(a, b)] += 1;
            }
            assert!(seen.iter().all(|&s| s == 1), "column {b}: {seen:?}");
        }
    }

    #[test]
    fn routing_strips_easy_queries() {
        let cfg = SyntheticConfig::default();
        let data = gen_synthetic_task(&mut Rng::new(2), 300, &cfg).unwrap();
        let mut latent = 0;
        for ex in &data {
            let hard = ex.query_tokens[0] == MARK_HARD;
            match ex.mode {
                SupervisionMode::Latent => {
                    latent += 1;
                    assert_eq!(ex.accuracy.correct, 0);
                    assert!(ex.latent_targets().is_some());
                }
                SupervisionMode::TextOnly => {
                    assert!(!hard);
                    let toks = ex.response_tokens().unwrap();
                    assert!(toks.iter().all(|t| !LATENT_FORMAT_TOKENS.contains(t)));
                }
            }
        }
        let hard = data.iter().filter(|e| e.query_tokens[0] == MARK_HARD).count();
        assert!(latent >= hard);
        assert!(hard > 100 && hard < 200);
    }

    #[test]
    fn hard_query_tokens_carry_no_label() {
        // All hard queries share the same tokens, so the tokens alone cannot
        // beat the majority-class rate.
        let cfg = SyntheticConfig::default();
        let data = gen_synthetic_task(&mut Rng::new(3), 400, &cfg).unwrap();
        let hard: Vec<_> = data.iter().filter(|e| e.query_tokens[0] == MARK_HARD).collect();
        assert!(hard.iter().all(|e| e.query_tokens == hard[0].query_tokens));
    }

    #[test]
    fn hashes_are_unique() {
        let data = gen_synthetic_task(&mut Rng::new(4), 500, &SyntheticConfig::default()).unwrap();
        let mut img: Vec<_> = data.iter().map(|e| e.metadata.image_hash.clone().unwrap()).collect();
        let mut txt: Vec<_> = data.iter().map(|e| e.metadata.question_hash.clone().unwrap()).collect();
        img.sort();
        img.dedup();
        txt.sort();
        txt.dedup();
        assert_eq!(img.len(), 500);
        assert_eq!(txt.len(), 500);
    }
}
