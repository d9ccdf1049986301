//! Ground-truth benchmark for explanation quality, plus the invariance ratio
//! and the bigram-detection graph builder.
//!
//! The benchmark task: a hardcoded model takes two random sequences of six
//! digits and counts their positional-free matches. Digits are embedded as
//! correlated nonnegative 10-vectors, sequences are concatenated into
//! 60-dimensional inputs, and a small zero-bias MLP is trained to reproduce
//! the match count as a dot-product similarity. The binary match matrix is
//! the ground-truth explanation; produced explanations are pooled to 6 x 6
//! and compared to it by mean cosine similarity (ACS).

use crate::error::{Error, Result};
use crate::explain::{
    acs, bilrp, coarse_grain, curvature, hessian_product, saliency, PairwiseExplanation, Partition,
};
use crate::lrp::GammaSchedule;
use crate::network::{train_mse, Layer, NetworkGraph, SimilarityModel, TrainConfig, TrainPair};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

pub const SEQUENCE_LEN: usize = 6;
pub const DIGITS: usize = 10;
pub const EMBED_DIM: usize = 10;
pub const INPUT_DIM: usize = SEQUENCE_LEN * EMBED_DIM;

/// Correlated nonnegative embedding of the ten digits.
#[derive(Clone, Debug)]
pub struct DigitEmbedding {
    vectors: Tensor,
    correlation: f64,
    seed: u64,
}

impl DigitEmbedding {
    /// Row `d` is the unit-norm representation of digit `d`.
    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn correlation(&self) -> f64 {
        self.correlation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, digit: usize) -> &[f64] {
        &self.vectors.data()[digit * EMBED_DIM..(digit + 1) * EMBED_DIM]
    }

    /// Mean cosine similarity over distinct digit pairs.
    pub fn mean_pairwise_cosine(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for a in 0..DIGITS {
            for b in (a + 1)..DIGITS {
                let ra = self.row(a);
                let rb = self.row(b);
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
                total += dot / (na * nb);
                count += 1;
            }
        }
        total / count as f64
    }
}

/// Builds the digit embedding: row `d` mixes an independent half-normal
/// direction with a shared one, `(1 - alpha) |g_d| + alpha |u|`, then is
/// scaled to unit norm. Larger `alpha` makes digits harder to tell apart.
pub fn make_embedding(seed: u64, alpha: f64) -> Result<DigitEmbedding> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "correlation alpha must be in [0, 1), got {alpha}"
        )));
    }
    let mut rng = Rng::new(seed);
    let shared: Vec<f64> = (0..EMBED_DIM)
        .map(|_| rng.standard_normal().abs())
        .collect();
    let mut vectors = Tensor::zeros(&[DIGITS, EMBED_DIM]);
    for d in 0..DIGITS {
        let row: Vec<f64> = (0..EMBED_DIM)
            .map(|i| (1.0 - alpha) * rng.standard_normal().abs() + alpha * shared[i])
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, v) in row.iter().enumerate() {
            vectors.data_mut()[d * EMBED_DIM + i] = v / norm;
        }
    }
    Ok(DigitEmbedding {
        vectors,
        correlation: alpha,
        seed,
    })
}

/// One benchmark example: two digit sequences, their embedded inputs, the
/// binary match matrix, and the match count.
#[derive(Clone, Debug)]
pub struct SequencePair {
    pub seq_a: [u8; SEQUENCE_LEN],
    pub seq_b: [u8; SEQUENCE_LEN],
    pub x_a: Tensor,
    pub x_b: Tensor,
    pub ground_truth: Tensor,
    pub target: f64,
}

impl SequencePair {
    pub fn from_sequences(
        emb: &DigitEmbedding,
        seq_a: [u8; SEQUENCE_LEN],
        seq_b: [u8; SEQUENCE_LEN],
    ) -> Self {
        let embed = |seq: &[u8; SEQUENCE_LEN]| {
            let mut data = Vec::with_capacity(INPUT_DIM);
            for &d in seq {
                data.extend_from_slice(emb.row(d as usize));
            }
            Tensor::from_vec(data)
        };
        let mut gt = Tensor::zeros(&[SEQUENCE_LEN, SEQUENCE_LEN]);
        let mut target = 0.0;
        for (p, &da) in seq_a.iter().enumerate() {
            for (q, &db) in seq_b.iter().enumerate() {
                if da == db {
                    gt.data_mut()[p * SEQUENCE_LEN + q] = 1.0;
                    target += 1.0;
                }
            }
        }
        SequencePair {
            seq_a,
            seq_b,
            x_a: embed(&seq_a),
            x_b: embed(&seq_b),
            ground_truth: gt,
            target,
        }
    }
}

/// Samples `n_pairs` uniformly random sequence pairs.
pub fn make_dataset(emb: &DigitEmbedding, n_pairs: usize, seed: u64) -> Vec<SequencePair> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let mut seq_a = [0u8; SEQUENCE_LEN];
        let mut seq_b = [0u8; SEQUENCE_LEN];
        for s in seq_a.iter_mut().chain(seq_b.iter_mut()) {
            *s = rng.below(DIGITS) as u8;
        }
        out.push(SequencePair::from_sequences(emb, seq_a, seq_b));
    }
    out
}

/// The benchmark feature map: zero-bias 60 -> 100 -> 100 -> 50 MLP with ReLU
/// after the hidden layers, He-initialized from the seed.
pub fn build_toy_net(seed: u64) -> NetworkGraph {
    let mut rng = Rng::new(seed);
    let dims = [INPUT_DIM, 100, 100, 50];
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let scale = (2.0 / w[0] as f64).sqrt();
        layers.push(Layer::Dense {
            weight: rng.normal_tensor(&[w[0], w[1]]).scale(scale),
            bias: None,
        });
        if i + 2 < dims.len() {
            layers.push(Layer::ReLU);
        }
    }
    NetworkGraph::new(vec![INPUT_DIM], layers).expect("static architecture")
}

/// Results of one benchmark run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub train_seed: u64,
    pub embedding_seed: u64,
    pub eval_seed: u64,
    pub correlation: f64,
    pub final_mse: f64,
    pub n_eval_pairs: usize,
    pub acs_saliency: f64,
    pub acs_curvature: f64,
    pub acs_hp: f64,
    /// `(gamma, acs)` points of the sweep, in grid order.
    pub gamma_sweep: Vec<(f64, f64)>,
    pub best_gamma: f64,
    pub best_gamma_acs: f64,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("serializable");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::parse("report file", e.to_string()))
    }

    /// One row per method, for terminal display.
    pub fn acs_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<16} {:>8}\n", "method", "acs"));
        s.push_str(&format!("{:<16} {:>8.4}\n", "saliency", self.acs_saliency));
        s.push_str(&format!("{:<16} {:>8.4}\n", "curvature", self.acs_curvature));
        s.push_str(&format!("{:<16} {:>8.4}\n", "hp", self.acs_hp));
        for (g, a) in &self.gamma_sweep {
            s.push_str(&format!("{:<16} {:>8.4}\n", format!("bilrp g={g}"), a));
        }
        s.push_str(&format!(
            "best gamma: {} (acs {:.4})\n",
            self.best_gamma, self.best_gamma_acs
        ));
        s
    }
}

/// Default gamma grid for the sweep.
pub const GAMMA_GRID: [f64; 9] = [0.0, 0.01, 0.03, 0.05, 0.09, 0.15, 0.25, 0.5, 1.0];

/// Number of training pairs sampled for [`run_benchmark`].
pub const TRAIN_PAIRS: usize = 3000;

/// Default mixing coefficient for the digit embedding.
pub const DEFAULT_ALPHA: f64 = 0.0;

/// Trains the benchmark model: embedding from `cfg.seed`, training pairs
/// from `cfg.seed + 1`, initialization from `cfg.seed + 2`.
pub fn train_toy_model(
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<(NetworkGraph, DigitEmbedding, f64)> {
    let emb = make_embedding(cfg.seed, alpha)?;
    let train_set = make_dataset(&emb, TRAIN_PAIRS, cfg.seed.wrapping_add(1));
    let net = build_toy_net(cfg.seed.wrapping_add(2));
    let pairs: Vec<TrainPair> = train_set
        .iter()
        .map(|p| TrainPair {
            x: p.x_a.clone(),
            xp: p.x_b.clone(),
            target: p.target,
        })
        .collect();
    let (trained, final_mse) = train_mse(&net, &pairs, cfg)?;
    Ok((trained, emb, final_mse))
}

/// Evaluation seed paired with a training seed.
pub fn eval_seed_for(train_seed: u64) -> u64 {
    train_seed.wrapping_add(3)
}

/// Trains the toy net on the digit-matching task and evaluates all
/// explanation methods against the ground truth.
pub fn run_benchmark(
    cfg: &TrainConfig,
    gammas: &[f64],
    n_eval_pairs: usize,
) -> Result<BenchmarkReport> {
    let (trained, emb, final_mse) = train_toy_model(cfg, DEFAULT_ALPHA)?;
    evaluate_model(
        &trained,
        &emb,
        gammas,
        n_eval_pairs,
        eval_seed_for(cfg.seed),
        final_mse,
        cfg.seed,
    )
}

/// Evaluation half of the benchmark, reusable with a pre-trained model.
///
/// Pairs whose ground-truth match matrix is all zero carry no signal for the
/// cosine metric and are skipped; sampling continues until `n_eval_pairs`
/// usable pairs are collected.
pub fn evaluate_model(
    net: &NetworkGraph,
    emb: &DigitEmbedding,
    gammas: &[f64],
    n_eval_pairs: usize,
    eval_seed: u64,
    final_mse: f64,
    train_seed: u64,
) -> Result<BenchmarkReport> {
    if n_eval_pairs == 0 {
        return Err(Error::InvalidArgument("need at least one eval pair".into()));
    }
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("gamma grid is empty".into()));
    }
    let model = SimilarityModel::new(net.clone());
    let mut eval_pairs = Vec::with_capacity(n_eval_pairs);
    let mut chunk_seed = eval_seed;
    while eval_pairs.len() < n_eval_pairs {
        for p in make_dataset(emb, n_eval_pairs + 16, chunk_seed) {
            if p.target > 0.0 && eval_pairs.len() < n_eval_pairs {
                eval_pairs.push(p);
            }
        }
        chunk_seed = chunk_seed.wrapping_add(1);
    }

    let rows = Partition::contiguous_blocks(INPUT_DIM, EMBED_DIM)?;
    let pool = |r: &PairwiseExplanation| coarse_grain(r, &rows, &rows);

    let mut gts = Vec::with_capacity(eval_pairs.len());
    let mut sal = Vec::new();
    let mut cur = Vec::new();
    let mut hpv = Vec::new();
    let mut per_gamma: Vec<Vec<PairwiseExplanation>> = vec![Vec::new(); gammas.len()];
    for p in &eval_pairs {
        gts.push(p.ground_truth.clone());
        sal.push(pool(&saliency(&p.x_a, &p.x_b))?);
        cur.push(pool(&curvature(&model, &p.x_a, &p.x_b)?)?);
        hpv.push(pool(&hessian_product(&model, &p.x_a, &p.x_b)?)?);
        for (gi, &g) in gammas.iter().enumerate() {
            let r = bilrp(&model, &p.x_a, &p.x_b, &GammaSchedule::uniform(g))?;
            per_gamma[gi].push(pool(&r)?);
        }
    }

    let acs_saliency = acs(&sal, &gts)?;
    let acs_curvature = acs(&cur, &gts)?;
    let acs_hp = acs(&hpv, &gts)?;
    let mut gamma_sweep = Vec::with_capacity(gammas.len());
    for (gi, &g) in gammas.iter().enumerate() {
        gamma_sweep.push((g, acs(&per_gamma[gi], &gts)?));
    }
    let (best_gamma, best_gamma_acs) = gamma_sweep
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();

    Ok(BenchmarkReport {
        train_seed,
        embedding_seed: emb.seed(),
        eval_seed,
        correlation: emb.correlation(),
        final_mse,
        n_eval_pairs: eval_pairs.len(),
        acs_saliency,
        acs_curvature,
        acs_hp,
        gamma_sweep,
        best_gamma,
        best_gamma_acs,
    })
}

/// Ratio of the mean similarity over related pairs to the mean over all
/// pairs. Values above 1 mean the model responds selectively to the
/// relation; a zero global mean leaves the score undefined.
pub fn invariance_score(
    model: &SimilarityModel,
    local_pairs: &[(Tensor, Tensor)],
    global_pairs: &[(Tensor, Tensor)],
) -> Result<f64> {
    if local_pairs.is_empty() || global_pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "invariance needs non-empty local and global pair sets".into(),
        ));
    }
    let mean = |pairs: &[(Tensor, Tensor)]| -> Result<f64> {
        let mut total = 0.0;
        for (x, xp) in pairs {
            total += model.similarity(x, xp)?;
        }
        Ok(total / pairs.len() as f64)
    };
    let local = mean(local_pairs)?;
    let global = mean(global_pairs)?;
    if global == 0.0 {
        return Err(Error::Undefined(
            "global mean similarity is zero; the ratio is undefined".into(),
        ));
    }
    Ok(local / global)
}

/// Builds the bigram-detection graph over 10 digit activation maps of size
/// `height x width`.
///
/// For every ordered digit pair `(j, k)` and every horizontal shift `s`, the
/// graph aligns channel `k` onto channel `j` (a convolution tap at offset
/// `s` implements the translation), takes the elementwise min of the aligned
/// pair (bigram present at a location only if both digits are), the max over
/// the candidate shifts (any alignment suffices), and a global spatial sum
/// (translation invariance). The output is one value per ordered pair,
/// row-major in `(j, k)`, i.e. 100 features.
///
/// The whole chain is zero-bias and positively homogeneous.
pub fn build_bigram_graph(height: usize, width: usize, shifts: &[usize]) -> Result<NetworkGraph> {
    if shifts.is_empty() {
        return Err(Error::InvalidArgument("need at least one shift".into()));
    }
    let max_shift = *shifts.iter().max().unwrap();
    if max_shift >= width {
        return Err(Error::InvalidArgument(format!(
            "shift {max_shift} exceeds map width {width}"
        )));
    }
    let t = shifts.len();
    let kw = max_shift + 1;
    let pairs = DIGITS * DIGITS;

    // Channel layout after the expansion conv: ((j*10 + k) * T + t) * 2 + s,
    // where slot s=0 reads digit j in place and s=1 reads digit k shifted
    // left by shifts[t].
    let c_out = pairs * t * 2;
    let mut weight = Tensor::zeros(&[c_out, DIGITS, 1, kw]);
    for j in 0..DIGITS {
        for k in 0..DIGITS {
            let p = j * DIGITS + k;
            for (ti, &s) in shifts.iter().enumerate() {
                let base = (p * t + ti) * 2;
                let w_idx = |co: usize, ci: usize, kx: usize| ((co * DIGITS + ci) * kw) + kx;
                weight.data_mut()[w_idx(base, j, 0)] = 1.0;
                weight.data_mut()[w_idx(base + 1, k, s)] = 1.0;
            }
        }
    }

    let ow = width - kw + 1;
    let layers = vec![
        Layer::Conv2D {
            weight,
            bias: None,
            stride: (1, 1),
        },
        // elementwise AND of the aligned pair
        Layer::MinPool {
            window: vec![2, 1, 1],
            stride: vec![2, 1, 1],
        },
        // OR over candidate alignments
        Layer::BranchMax { branches: t },
        // global translation-invariant read-out
        Layer::SumPool {
            window: vec![1, height, ow],
            stride: vec![1, 1, 1],
        },
    ];
    NetworkGraph::new(vec![DIGITS, height, width], layers)
}

/// Gaussian blob with standard deviation `sigma` centered at `(cy, cx)`.
pub fn gaussian_blob(height: usize, width: usize, cy: f64, cx: f64, sigma: f64) -> Tensor {
    let mut t = Tensor::zeros(&[height, width]);
    for y in 0..height {
        for x in 0..width {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            t.data_mut()[y * width + x] = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
        }
    }
    t
}

/// Stacks per-digit blob maps into the 10-channel input of the bigram graph.
pub fn digit_maps(
    height: usize,
    width: usize,
    blobs: &[(usize, f64, f64)],
    sigma: f64,
) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[DIGITS, height, width]);
    for &(digit, cy, cx) in blobs {
        if digit >= DIGITS {
            return Err(Error::InvalidArgument(format!("digit {digit} out of range")));
        }
        let blob = gaussian_blob(height, width, cy, cx, sigma);
        for (dst, src) in t.data_mut()[digit * height * width..(digit + 1) * height * width]
            .iter_mut()
            .zip(blob.data())
        {
            *dst += src;
        }
    }
    Ok(t)
}
