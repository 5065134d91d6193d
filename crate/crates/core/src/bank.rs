//! The prototype memory bank.
//!
//! Each class keeps a short history of calibrated prototype copies (newest
//! last), its immutable initial footprint, running statistics over the
//! copies, and a history of those statistics that the smoothing kernel
//! flattens. [`PrototypeBank::calibrate_and_update`] runs the whole
//! refresh: running statistics, smoothing, whitening and re-colouring,
//! then one gradient step on the cross-correlation and footprint-anchor
//! losses before the new copy is appended.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::extractor::{read_f64s, read_u32, write_f64s, write_u32};
use crate::linalg::{self, cosine, psd_inv_sqrt, psd_sqrt, sigmoid, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Delta,
    Uniform,
    Gaussian,
}

/// Symmetric kernel over positions in a class's statistics history; the
/// distance between two positions is their index gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingKernel {
    pub kind: KernelKind,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
}

fn default_bandwidth() -> f64 {
    1.0
}

impl Default for SmoothingKernel {
    fn default() -> Self {
        Self {
            kind: KernelKind::Gaussian,
            bandwidth: 1.0,
        }
    }
}

impl SmoothingKernel {
    pub fn delta() -> Self {
        Self {
            kind: KernelKind::Delta,
            bandwidth: 1.0,
        }
    }

    pub fn uniform() -> Self {
        Self {
            kind: KernelKind::Uniform,
            bandwidth: 1.0,
        }
    }

    pub fn gaussian(bandwidth: f64) -> Self {
        Self {
            kind: KernelKind::Gaussian,
            bandwidth,
        }
    }

    fn raw_weight(&self, gap: usize) -> f64 {
        match self.kind {
            KernelKind::Delta => {
                if gap == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            KernelKind::Uniform => 1.0,
            KernelKind::Gaussian => {
                let g = gap as f64 / self.bandwidth;
                (-0.5 * g * g).exp()
            }
        }
    }

    /// Normalised weights over `n` history positions, centred on the newest
    /// (last) position.
    pub fn weights(&self, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|i| self.raw_weight(n - 1 - i)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    }
}

/// Which way the footprint term enters the prototype refinement step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSign {
    /// Descend `L_COR + L_CS` exactly as written.
    #[default]
    Literal,
    /// Descend `L_COR − L_CS`, i.e. pull prototypes toward their footprints.
    Attract,
}

impl AnchorSign {
    fn factor(self) -> f64 {
        match self {
            AnchorSign::Literal => 1.0,
            AnchorSign::Attract => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Largest retention depth `B`.
    pub b_max: usize,
    /// Retention depth per session (index 0 is the base session). Sessions
    /// past the end reuse the last entry. When absent the depth starts at
    /// `b_max` for the base session and drops by one per session, down to 1.
    #[serde(default)]
    pub b_schedule: Option<Vec<usize>>,
    pub lambda: f64,
    pub ridge: f64,
    pub ema_momentum: f64,
    #[serde(default)]
    pub kernel: SmoothingKernel,
    #[serde(default)]
    pub anchor_sign: AnchorSign,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            b_max: 4,
            b_schedule: None,
            lambda: 0.1,
            ridge: 1e-6,
            ema_momentum: 0.9,
            kernel: SmoothingKernel::default(),
            anchor_sign: AnchorSign::Literal,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b_max == 0 {
            return Err(config("b_max must be at least 1"));
        }
        if let Some(s) = &self.b_schedule {
            if s.is_empty() || s.iter().any(|&d| d == 0 || d > self.b_max) {
                return Err(config("b_schedule depths must lie in 1..=b_max"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config("lambda must be nonnegative"));
        }
        if !(self.ridge > 0.0) {
            return Err(config("ridge must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(config("ema_momentum must lie in [0, 1]"));
        }
        if self.kernel.kind == KernelKind::Gaussian && !(self.kernel.bandwidth > 0.0) {
            return Err(config("gaussian bandwidth must be positive"));
        }
        Ok(())
    }

    /// Retention depth for classes created in `session` (1-based).
    pub fn depth_for_session(&self, session: usize) -> usize {
        let idx = session.saturating_sub(1);
        match &self.b_schedule {
            Some(s) => s[idx.min(s.len() - 1)],
            None => self.b_max.saturating_sub(idx).max(1),
        }
    }
}

/// Everything the bank remembers about one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassHistory {
    pub class_id: usize,
    pub session_created: usize,
    depth: usize,
    copies: VecDeque<Vec<f64>>,
    footprint: Vec<f64>,
    running_mean: Vec<f64>,
    running_cov: Matrix,
    stats_history: VecDeque<(Vec<f64>, Matrix)>,
    flattened_mean: Vec<f64>,
    flattened_cov: Matrix,
}

impl ClassHistory {
    /// A class seen for the first time: the prototype becomes the first copy
    /// and the footprint, with zero spread.
    pub fn new(class_id: usize, session_created: usize, prototype: Vec<f64>, depth: usize) -> Self {
        let m = prototype.len();
        let zero = Matrix::zeros(m, m);
        Self {
            class_id,
            session_created,
            depth: depth.max(1),
            copies: VecDeque::from([prototype.clone()]),
            footprint: prototype.clone(),
            running_mean: prototype.clone(),
            running_cov: zero.clone(),
            stats_history: VecDeque::from([(prototype.clone(), zero.clone())]),
            flattened_mean: prototype,
            flattened_cov: zero,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn copies(&self) -> impl ExactSizeIterator<Item = &Vec<f64>> {
        self.copies.iter()
    }

    pub fn newest(&self) -> &[f64] {
        self.copies.back().expect("a class always has a copy")
    }

    /// Mean of the stored copies.
    pub fn average(&self) -> Vec<f64> {
        let refs: Vec<&[f64]> = self.copies.iter().map(Vec::as_slice).collect();
        mean_of(&refs)
    }

    pub fn footprint(&self) -> &[f64] {
        &self.footprint
    }

    pub fn running_stats(&self) -> (&[f64], &Matrix) {
        (&self.running_mean, &self.running_cov)
    }

    pub fn flattened_stats(&self) -> (&[f64], &Matrix) {
        (&self.flattened_mean, &self.flattened_cov)
    }

    pub fn stats_history(&self) -> impl ExactSizeIterator<Item = &(Vec<f64>, Matrix)> {
        self.stats_history.iter()
    }

    /// Appends a copy and evicts from the front beyond the retention depth.
    pub fn push_copy(&mut self, copy: Vec<f64>) {
        self.copies.push_back(copy);
        while self.copies.len() > self.depth {
            self.copies.pop_front();
        }
    }

    /// Batch mean/covariance over the copies, blended into the running
    /// statistics as `momentum·old + (1 − momentum)·batch`. The result is
    /// also appended to the statistics history.
    pub fn update_running_stats(&mut self, momentum: f64) {
        let refs: Vec<&[f64]> = self.copies.iter().map(Vec::as_slice).collect();
        let (mean, cov) = batch_stats(&refs);
        let keep = 1.0 - momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&mean) {
            *r = momentum * *r + keep * b;
        }
        let mut blended = self.running_cov.scaled(momentum);
        blended.add_scaled(&cov, keep);
        self.running_cov = blended;
        self.stats_history
            .push_back((self.running_mean.clone(), self.running_cov.clone()));
        while self.stats_history.len() > self.depth {
            self.stats_history.pop_front();
        }
    }
}

fn mean_of(vs: &[&[f64]]) -> Vec<f64> {
    let m = vs[0].len();
    let mut acc = vec![0.0; m];
    for v in vs {
        linalg::add_assign_scaled(&mut acc, v, 1.0);
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Population mean and covariance (`1/B` normalisation).
fn batch_stats(vs: &[&[f64]]) -> (Vec<f64>, Matrix) {
    let mean = mean_of(vs);
    let m = mean.len();
    let mut cov = Matrix::zeros(m, m);
    let w = 1.0 / vs.len() as f64;
    for v in vs {
        let d = linalg::sub(v, &mean);
        for i in 0..m {
            for j in i..m {
                let s = w * d[i] * d[j];
                cov[(i, j)] += s;
                if i != j {
                    cov[(j, i)] += s;
                }
            }
        }
    }
    (mean, cov)
}

/// Arithmetic mean of a class's support embeddings.
pub fn compute_prototype(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| contract("compute_prototype: no embeddings"))?;
    if embeddings.iter().any(|e| e.len() != first.len()) {
        return Err(contract("compute_prototype: embeddings differ in length"));
    }
    let refs: Vec<&[f64]> = embeddings.iter().map(Vec::as_slice).collect();
    Ok(mean_of(&refs))
}

/// Kernel-smoothed ("flattened") statistics for each class, weighting the
/// positions of its statistics history around the newest one.
pub fn smooth_stats(histories: &[ClassHistory], kernel: &SmoothingKernel) -> Vec<(Vec<f64>, Matrix)> {
    histories
        .iter()
        .map(|h| {
            let weights = kernel.weights(h.stats_history.len());
            let m = h.running_mean.len();
            let mut mean = vec![0.0; m];
            let mut cov = Matrix::zeros(m, m);
            for (w, (mu, sigma)) in weights.iter().zip(&h.stats_history) {
                if *w == 0.0 {
                    continue;
                }
                linalg::add_assign_scaled(&mut mean, mu, *w);
                cov.add_scaled(sigma, *w);
            }
            (mean, cov)
        })
        .collect()
}

/// `Σ̃^{1/2} Σ^{-1/2} (c − μ) + μ̃`: whiten with the raw statistics, re-colour
/// with the flattened ones.
pub fn whiten_recolor(
    c: &[f64],
    mean: &[f64],
    cov: &Matrix,
    flat_mean: &[f64],
    flat_cov: &Matrix,
    ridge: f64,
) -> Result<Vec<f64>> {
    let m = c.len();
    if mean.len() != m || flat_mean.len() != m || cov.shape() != (m, m) || flat_cov.shape() != (m, m)
    {
        return Err(contract("whiten_recolor: dimension mismatch"));
    }
    let whitener = psd_inv_sqrt(cov, ridge)?;
    let colourer = psd_sqrt(flat_cov, ridge)?;
    Ok(apply_transport(c, mean, &whitener, flat_mean, &colourer))
}

fn apply_transport(
    c: &[f64],
    mean: &[f64],
    whitener: &Matrix,
    flat_mean: &[f64],
    colourer: &Matrix,
) -> Vec<f64> {
    let centred = linalg::sub(c, mean);
    let white = whitener.matvec_unchecked(&centred);
    let mut out = colourer.matvec_unchecked(&white);
    linalg::add_assign_scaled(&mut out, flat_mean, 1.0);
    out
}

/// `∂cos(u, v)/∂u`, zero when either side is degenerate.
fn cosine_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>) {
    let cs = cosine(u, v);
    if cs.degenerate {
        return (0.0, vec![0.0; u.len()]);
    }
    let (nu, nv) = (linalg::norm(u), linalg::norm(v));
    let g = u
        .iter()
        .zip(v)
        .map(|(ui, vi)| vi / (nu * nv) - cs.value * ui / (nu * nu))
        .collect();
    (cs.value, g)
}

fn tanh_all(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.tanh()).collect()
}

/// `Σ_{i≠j} σ(cos(tanh cᵢ, tanh cⱼ))` over ordered pairs, with its gradient
/// with respect to every prototype.
pub fn correlation_loss(prototypes: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = prototypes.len();
    let mut grads: Vec<Vec<f64>> = prototypes.iter().map(|p| vec![0.0; p.len()]).collect();
    if n < 2 {
        return (0.0, grads);
    }
    let squashed: Vec<Vec<f64>> = prototypes.iter().map(|p| tanh_all(p)).collect();
    let mut loss = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let (cs, gi) = cosine_grad(&squashed[i], &squashed[j]);
            let (_, gj) = cosine_grad(&squashed[j], &squashed[i]);
            let s = sigmoid(cs);
            // Each unordered pair appears twice in the ordered sum.
            loss += 2.0 * s;
            let ds = 2.0 * s * (1.0 - s);
            linalg::add_assign_scaled(&mut grads[i], &gi, ds);
            linalg::add_assign_scaled(&mut grads[j], &gj, ds);
        }
    }
    for (g, u) in grads.iter_mut().zip(&squashed) {
        for (gk, uk) in g.iter_mut().zip(u) {
            *gk *= 1.0 - uk * uk;
        }
    }
    (loss, grads)
}

/// `Σᵢ cos(tanh c̃ᵢ, tanh cᵢ⁽⁰⁾)` with gradients for the current prototypes
/// (footprints are constants).
pub fn cosine_anchor_loss(
    current: &[Vec<f64>],
    initial: &[Vec<f64>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if current.len() != initial.len() {
        return Err(contract(format!(
            "cosine_anchor_loss: {} prototypes but {} footprints",
            current.len(),
            initial.len()
        )));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(current.len());
    for (c, c0) in current.iter().zip(initial) {
        if c.len() != c0.len() {
            return Err(contract("cosine_anchor_loss: dimension mismatch"));
        }
        let u = tanh_all(c);
        let (cs, mut g) = cosine_grad(&u, &tanh_all(c0));
        loss += cs;
        for (gk, uk) in g.iter_mut().zip(&u) {
            *gk *= 1.0 - uk * uk;
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// One gradient step `C ← C − λ ∂(L_COR ± L_CS)/∂C`.
pub fn refine_prototypes(
    current: &[Vec<f64>],
    footprints: &[Vec<f64>],
    lambda: f64,
    sign: AnchorSign,
) -> Result<Vec<Vec<f64>>> {
    let (_, cor) = correlation_loss(current);
    let (_, cs) = cosine_anchor_loss(current, footprints)?;
    let s = sign.factor();
    Ok(current
        .iter()
        .zip(cor.iter().zip(&cs))
        .map(|(c, (gc, ga))| {
            c.iter()
                .zip(gc.iter().zip(ga))
                .map(|(ck, (a, b))| ck - lambda * (a + s * b))
                .collect()
        })
        .collect())
}

/// Stored-vector accounting for the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    /// Prototype copies held, each an M-dimensional vector.
    pub vectors: usize,
    /// Matching statistic means.
    pub stat_means: usize,
    /// Matching M×M statistic matrices.
    pub stat_matrices: usize,
}

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    dim: usize,
    classes: Vec<ClassHistory>,
    // Square roots of the flattened covariances, refreshed at epoch starts.
    colourers: Option<Vec<Matrix>>,
}

impl PrototypeBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            classes: Vec::new(),
            colourers: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassHistory] {
        &self.classes
    }

    pub fn class(&self, class_id: usize) -> Option<&ClassHistory> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    /// Registers a new class with its first prototype (also its footprint).
    pub fn insert(
        &mut self,
        class_id: usize,
        session: usize,
        prototype: Vec<f64>,
        cfg: &BankConfig,
    ) -> Result<()> {
        if prototype.len() != self.dim {
            return Err(contract("prototype dimension does not match the bank"));
        }
        if self.class(class_id).is_some() {
            return Err(contract(format!("class {class_id} is already in the bank")));
        }
        let depth = cfg.depth_for_session(session);
        self.classes
            .push(ClassHistory::new(class_id, session, prototype, depth));
        self.colourers = None;
        Ok(())
    }

    /// Marks the flattened statistics stale; they are recomputed on the next
    /// calibration, and then held fixed for the rest of the epoch.
    pub fn begin_epoch(&mut self) {
        self.colourers = None;
    }

    /// Running statistics, smoothing (at epoch boundaries), whitening and
    /// re-colouring of each newest copy, one refinement step, append/evict.
    pub fn calibrate_and_update(&mut self, cfg: &BankConfig) -> Result<()> {
        if self.classes.is_empty() {
            return Ok(());
        }
        for h in &mut self.classes {
            h.update_running_stats(cfg.ema_momentum);
        }
        if self.colourers.is_none() {
            let flat = smooth_stats(&self.classes, &cfg.kernel);
            let mut colourers = Vec::with_capacity(flat.len());
            for (h, (mean, cov)) in self.classes.iter_mut().zip(flat) {
                colourers.push(psd_sqrt(&cov, cfg.ridge)?);
                h.flattened_mean = mean;
                h.flattened_cov = cov;
            }
            self.colourers = Some(colourers);
        }
        let colourers = self.colourers.as_ref().expect("set above");
        let mut transported = Vec::with_capacity(self.classes.len());
        for (h, colourer) in self.classes.iter().zip(colourers) {
            let whitener = psd_inv_sqrt(&h.running_cov, cfg.ridge)?;
            transported.push(apply_transport(
                h.newest(),
                &h.running_mean,
                &whitener,
                &h.flattened_mean,
                colourer,
            ));
        }
        let footprints: Vec<Vec<f64>> = self.classes.iter().map(|h| h.footprint.clone()).collect();
        let refined = refine_prototypes(&transported, &footprints, cfg.lambda, cfg.anchor_sign)?;
        for (h, c) in self.classes.iter_mut().zip(refined) {
            h.push_copy(c);
        }
        Ok(())
    }

    pub fn memory_budget(&self) -> MemoryBudget {
        let vectors = self.classes.iter().map(|c| c.copies.len()).sum();
        MemoryBudget {
            vectors,
            stat_means: vectors,
            stat_matrices: vectors,
        }
    }

    /// Writes the `PQBANK1` snapshot: magic, u32 class count, u32 dimension,
    /// then per class u32 id, u32 copy count, the copies, the footprint, the
    /// running mean and the row-major running covariance (all f64 LE).
    pub fn write_snapshot(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        write_u32(w, self.classes.len())?;
        write_u32(w, self.dim)?;
        for h in &self.classes {
            write_u32(w, h.class_id)?;
            write_u32(w, h.copies.len())?;
            for c in &h.copies {
                write_f64s(w, c)?;
            }
            write_f64s(w, &h.footprint)?;
            write_f64s(w, &h.running_mean)?;
            write_f64s(w, h.running_cov.as_slice())?;
        }
        Ok(())
    }

    pub fn read_snapshot(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Data("not a PQBANK1 snapshot".into()));
        }
        let count = read_u32(r)?;
        let dim = read_u32(r)?;
        let mut bank = Self::new(dim);
        for _ in 0..count {
            let class_id = read_u32(r)?;
            let n = read_u32(r)?;
            if n == 0 {
                return Err(Error::Data(format!("class {class_id} has no copies")));
            }
            let copies: VecDeque<Vec<f64>> =
                (0..n).map(|_| read_f64s(r, dim)).collect::<Result<_>>()?;
            let footprint = read_f64s(r, dim)?;
            let running_mean = read_f64s(r, dim)?;
            let running_cov = Matrix::from_vec(dim, dim, read_f64s(r, dim * dim)?)?;
            bank.classes.push(ClassHistory {
                class_id,
                session_created: 0,
                depth: n,
                copies,
                footprint,
                stats_history: VecDeque::from([(running_mean.clone(), running_cov.clone())]),
                flattened_mean: running_mean.clone(),
                flattened_cov: running_cov.clone(),
                running_mean,
                running_cov,
            });
        }
        Ok(bank)
    }
}

const BANK_MAGIC: &[u8; 7] = b"PQBANK1";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rvec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * rng.normal()).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn prototype_means() {
        assert_eq!(compute_prototype(&[vec![1.0, 2.0]]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(
            compute_prototype(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(compute_prototype(&[]).is_err());
        assert!(compute_prototype(&[vec![1.0], vec![1.0, 2.0]]).is_err());

        let mut rng = Rng::new(1, 0);
        let vs: Vec<Vec<f64>> = (0..5).map(|_| rvec(&mut rng, 8, 1.0)).collect();
        let got = compute_prototype(&vs).unwrap();
        for k in 0..8 {
            let m = (vs[0][k] + vs[1][k] + vs[2][k] + vs[3][k] + vs[4][k]) / 5.0;
            assert!((got[k] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_cases() {
        let mut h = ClassHistory::new(0, 1, vec![1.0, 2.0], 3);
        h.update_running_stats(0.0);
        assert_eq!(h.running_mean, vec![1.0, 2.0]);
        assert_eq!(h.running_cov, Matrix::zeros(2, 2));

        let mut h = ClassHistory::new(0, 1, vec![1.0, 0.0], 3);
        h.push_copy(vec![-1.0, 0.0]);
        h.update_running_stats(0.0);
        assert_eq!(h.running_mean, vec![0.0, 0.0]);
        assert_eq!(h.running_cov, Matrix::from_diag(&[1.0, 0.0]));

        let mut h = ClassHistory::new(0, 1, vec![1.0, 0.0], 3);
        h.push_copy(vec![-1.0, 5.0]);
        h.update_running_stats(1.0);
        assert_eq!(h.running_mean, vec![1.0, 0.0]);
        assert_eq!(h.running_cov, Matrix::zeros(2, 2));
    }

    fn history_with_stats(stats: &[(Vec<f64>, Matrix)]) -> ClassHistory {
        let mut h = ClassHistory::new(0, 1, stats[0].0.clone(), stats.len());
        h.stats_history = stats.iter().cloned().collect();
        h
    }

    #[test]
    fn smoothing_kernels() {
        let stats = vec![
            (vec![1.0, 0.0], Matrix::from_diag(&[1.0, 2.0])),
            (vec![3.0, 2.0], Matrix::from_diag(&[3.0, 0.0])),
        ];
        let h = history_with_stats(&stats);
        let delta = &smooth_stats(std::slice::from_ref(&h), &SmoothingKernel::delta())[0];
        assert_eq!(delta.0, stats[1].0);
        assert_eq!(delta.1, stats[1].1);
        let uni = &smooth_stats(std::slice::from_ref(&h), &SmoothingKernel::uniform())[0];
        assert_eq!(uni.0, vec![2.0, 1.0]);
        assert_eq!(uni.1, Matrix::from_diag(&[2.0, 1.0]));
    }

    #[test]
    fn gaussian_kernel_matches_explicit_weights() {
        let mus = [vec![1.0, -1.0], vec![0.5, 2.0], vec![-3.0, 0.25]];
        let stats: Vec<_> = mus
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), Matrix::from_diag(&[i as f64 + 1.0, 2.0 * i as f64])))
            .collect();
        let h = history_with_stats(&stats);
        let (mean, cov) = smooth_stats(&[h], &SmoothingKernel::gaussian(1.0)).remove(0);
        // Newest position is index 2: gaps 2, 1, 0.
        let raw = [(-2.0f64).exp(), (-0.5f64).exp(), 1.0];
        let z: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / z).collect();
        for k in 0..2 {
            let expect: f64 = (0..3).map(|i| w[i] * mus[i][k]).sum();
            assert!((mean[k] - expect).abs() < 1e-12);
        }
        let expect00: f64 = (0..3).map(|i| w[i] * (i as f64 + 1.0)).sum();
        assert!((cov[(0, 0)] - expect00).abs() < 1e-12);
    }

    #[test]
    fn whiten_recolor_cases() {
        let mut rng = Rng::new(2, 0);
        let c = rvec(&mut rng, 3, 1.0);
        let mu = rvec(&mut rng, 3, 1.0);
        let a = Matrix::from_rows(&[
            vec![2.0, 0.3, 0.1],
            vec![0.3, 1.0, -0.2],
            vec![0.1, -0.2, 0.5],
        ])
        .unwrap();
        let out = whiten_recolor(&c, &mu, &a, &mu, &a, 1e-6).unwrap();
        assert!(close(&out, &c, 1e-9));

        let i2 = Matrix::identity(2);
        let out = whiten_recolor(&[2.0, 0.0], &[0.0, 0.0], &i2, &[1.0, 1.0], &i2, 1e-12).unwrap();
        assert!(close(&out, &[3.0, 1.0], 1e-9));

        let out = whiten_recolor(
            &[2.0, 2.0],
            &[0.0, 0.0],
            &Matrix::from_diag(&[4.0, 1.0]),
            &[0.0, 0.0],
            &i2,
            1e-12,
        )
        .unwrap();
        assert!(close(&out, &[1.0, 2.0], 1e-9));

        let skew = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(whiten_recolor(&[0.0, 0.0], &[0.0, 0.0], &skew, &[0.0, 0.0], &i2, 1e-6).is_err());
    }

    #[test]
    fn whiten_recolor_is_affine() {
        let mut rng = Rng::new(3, 0);
        let m = 4;
        let v = rvec(&mut rng, m, 1.0);
        let sig = {
            let mut s = Matrix::identity(m);
            s.add_scaled(&Matrix::outer(&v, &v), 1.0);
            s
        };
        let w = rvec(&mut rng, m, 1.0);
        let flat = {
            let mut s = Matrix::identity(m).scaled(0.5);
            s.add_scaled(&Matrix::outer(&w, &w), 2.0);
            s
        };
        let (mu, mu_t) = (rvec(&mut rng, m, 1.0), rvec(&mut rng, m, 1.0));
        let (c1, c2) = (rvec(&mut rng, m, 2.0), rvec(&mut rng, m, 2.0));
        let alpha = 0.3;
        let mix: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let f = |c: &[f64]| whiten_recolor(c, &mu, &sig, &mu_t, &flat, 1e-6).unwrap();
        let (o1, o2, om) = (f(&c1), f(&c2), f(&mix));
        for k in 0..m {
            assert!((om[k] - (alpha * o1[k] + (1.0 - alpha) * o2[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn correlation_loss_values() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let (l, _) = correlation_loss(&[a.clone(), b]);
        assert!((l - 1.0).abs() < 1e-15);
        let (l, _) = correlation_loss(&[a.clone(), a.clone()]);
        // 2·σ(1) = 2 / (1 + e^{-1})
        assert!((l - 1.462_117_157_260_009_8).abs() < 1e-12);
        let (l, g) = correlation_loss(&[a]);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![vec![0.0, 0.0]]);
    }

    fn fd_check(f: impl Fn(&[Vec<f64>]) -> f64, at: &[Vec<f64>], grads: &[Vec<f64>], tol: f64) {
        let h = 1e-5;
        for i in 0..at.len() {
            for k in 0..at[i].len() {
                let mut p = at.to_vec();
                let mut m = at.to_vec();
                p[i][k] += h;
                m[i][k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let an = grads[i][k];
                assert!(
                    (fd - an).abs() <= tol * fd.abs().max(an.abs()).max(1.0),
                    "proto {i} dim {k}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn correlation_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4, 0);
        for _ in 0..10 {
            let ps: Vec<Vec<f64>> = (0..3).map(|_| rvec(&mut rng, 6, 1.0)).collect();
            let (_, g) = correlation_loss(&ps);
            fd_check(|p| correlation_loss(p).0, &ps, &g, 1e-5);
        }
    }

    #[test]
    fn anchor_loss_values_and_gradient() {
        let mut rng = Rng::new(5, 0);
        let cur: Vec<Vec<f64>> = (0..4).map(|_| rvec(&mut rng, 5, 1.0)).collect();
        let (l, _) = cosine_anchor_loss(&cur, &cur).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
        let neg: Vec<Vec<f64>> = cur.iter().map(|c| c.iter().map(|x| -x).collect()).collect();
        let (l, _) = cosine_anchor_loss(&neg, &cur).unwrap();
        assert!((l + 4.0).abs() < 1e-12);
        assert!(cosine_anchor_loss(&cur[..2], &cur).is_err());

        let init: Vec<Vec<f64>> = (0..4).map(|_| rvec(&mut rng, 5, 1.0)).collect();
        let (_, g) = cosine_anchor_loss(&cur, &init).unwrap();
        fd_check(|p| cosine_anchor_loss(p, &init).unwrap().0, &cur, &g, 1e-5);
    }

    #[test]
    fn refine_null_step_and_single_class_direction() {
        let mut rng = Rng::new(6, 0);
        let cur: Vec<Vec<f64>> = (0..3).map(|_| rvec(&mut rng, 4, 1.0)).collect();
        let init: Vec<Vec<f64>> = (0..3).map(|_| rvec(&mut rng, 4, 1.0)).collect();
        assert_eq!(
            refine_prototypes(&cur, &init, 0.0, AnchorSign::Literal).unwrap(),
            cur
        );

        // One class: only the anchor term acts, and a small step must lower it
        // by about λ‖∇‖² (first-order descent check against finite differences).
        let one = vec![cur[0].clone()];
        let foot = vec![init[0].clone()];
        let lambda = 1e-4;
        let stepped = refine_prototypes(&one, &foot, lambda, AnchorSign::Literal).unwrap();
        let f = |p: &[Vec<f64>]| cosine_anchor_loss(p, &foot).unwrap().0;
        let h = 1e-6;
        let mut fd_sq = 0.0;
        for k in 0..4 {
            let mut p = one.clone();
            let mut m = one.clone();
            p[0][k] += h;
            m[0][k] -= h;
            let d = (f(&p) - f(&m)) / (2.0 * h);
            fd_sq += d * d;
            assert!(((one[0][k] - stepped[0][k]) / lambda - d).abs() < 1e-6);
        }
        let drop = f(&one) - f(&stepped);
        assert!((drop - lambda * fd_sq).abs() < 1e-3 * lambda * fd_sq);

        let up = refine_prototypes(&one, &foot, lambda, AnchorSign::Attract).unwrap();
        assert!(f(&up) > f(&one));
    }

    #[test]
    fn depth_schedule() {
        let cfg = BankConfig {
            b_max: 3,
            ..BankConfig::default()
        };
        assert_eq!(
            (1..=5).map(|s| cfg.depth_for_session(s)).collect::<Vec<_>>(),
            vec![3, 2, 1, 1, 1]
        );
        let cfg = BankConfig {
            b_max: 4,
            b_schedule: Some(vec![4, 4, 2]),
            ..BankConfig::default()
        };
        assert_eq!(cfg.depth_for_session(5), 2);
        assert!(BankConfig {
            b_max: 2,
            b_schedule: Some(vec![3]),
            ..BankConfig::default()
        }
        .validate()
        .is_err());
    }

    fn identity_cfg(b_max: usize) -> BankConfig {
        BankConfig {
            b_max,
            b_schedule: None,
            lambda: 0.0,
            ridge: 1e-6,
            ema_momentum: 1.0,
            kernel: SmoothingKernel::delta(),
            anchor_sign: AnchorSign::Literal,
        }
    }

    #[test]
    fn fresh_class_composed_identities() {
        let cfg = BankConfig {
            ema_momentum: 0.5,
            ..identity_cfg(3)
        };
        let mut bank = PrototypeBank::new(2);
        bank.insert(7, 1, vec![0.4, -1.2], &cfg).unwrap();
        bank.calibrate_and_update(&cfg).unwrap();
        let h = bank.class(7).unwrap();
        assert_eq!(h.copies().len(), 2);
        assert!(close(h.newest(), &[0.4, -1.2], 1e-12));
    }

    #[test]
    fn eviction_keeps_depth() {
        let cfg = BankConfig {
            lambda: 0.1,
            ema_momentum: 0.5,
            kernel: SmoothingKernel::gaussian(1.0),
            ..identity_cfg(3)
        };
        let mut bank = PrototypeBank::new(3);
        bank.insert(0, 1, vec![0.5, 0.1, -0.3], &cfg).unwrap();
        bank.insert(1, 1, vec![-0.2, 0.8, 0.4], &cfg).unwrap();
        for round in 0..6 {
            let before: Vec<Vec<f64>> = bank.classes()[0].copies().cloned().collect();
            bank.begin_epoch();
            bank.calibrate_and_update(&cfg).unwrap();
            let after: Vec<Vec<f64>> = bank.classes()[0].copies().cloned().collect();
            assert!(after.len() <= 3);
            if round >= 2 {
                assert_eq!(after.len(), 3);
                // Evicted at the front, appended at the end.
                assert_eq!(&after[..2], &before[1..]);
            }
        }
        assert_eq!(bank.classes()[0].footprint(), &[0.5, 0.1, -0.3]);
    }

    #[test]
    fn memory_budget_counts() {
        let cfg = identity_cfg(1);
        let mut bank = PrototypeBank::new(2);
        for c in 0..3 {
            bank.insert(c, 1, vec![c as f64, 1.0], &cfg).unwrap();
        }
        assert_eq!(bank.memory_budget().vectors, 3);

        let cfg = identity_cfg(3);
        let mut bank = PrototypeBank::new(2);
        let sizes = [60usize, 5, 5];
        let mut id = 0;
        for (s, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                bank.insert(id, s + 1, vec![id as f64, 0.0], &cfg).unwrap();
                id += 1;
            }
        }
        for _ in 0..5 {
            bank.calibrate_and_update(&cfg).unwrap();
        }
        let b = bank.memory_budget();
        assert_eq!(b.vectors, 3 * 60 + 2 * 5 + 5);
        assert_eq!(b.stat_matrices, 195);
    }

    #[test]
    fn snapshot_round_trip() {
        let cfg = BankConfig::default();
        let mut bank = PrototypeBank::new(3);
        bank.insert(4, 1, vec![0.1, 0.2, 0.3], &cfg).unwrap();
        bank.insert(9, 2, vec![-0.1, 0.5, 0.0], &cfg).unwrap();
        bank.calibrate_and_update(&cfg).unwrap();
        let mut buf = Vec::new();
        bank.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..7], b"PQBANK1");
        let back = PrototypeBank::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back.class_ids(), vec![4, 9]);
        for (a, b) in back.classes().iter().zip(bank.classes()) {
            assert_eq!(a.copies().cloned().collect::<Vec<_>>(), b.copies().cloned().collect::<Vec<_>>());
            assert_eq!(a.footprint(), b.footprint());
            assert_eq!(a.running_stats().1, b.running_stats().1);
        }
        assert!(bank.insert(4, 3, vec![0.0; 3], &cfg).is_err());
    }
}
