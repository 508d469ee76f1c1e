//! 0-dimensional sublevel-set persistence of 1-D signals and their
//! persistence-image rasterization.
//!
//! A channel of a window is treated as a piecewise-linear function sampled at
//! integer indices. Its sublevel sets `{i : x_i <= t}` are unions of index
//! intervals; as the threshold `t` grows, intervals appear at local minima and
//! merge at local maxima. Each merge kills the younger component (elder rule)
//! and yields one finite `(birth, death)` pair. The component born at the
//! global minimum never dies and is reported separately as the essential
//! birth of the channel.
//!
//! Persistence images place an isotropic Gaussian at `(birth, lifetime)` for
//! every finite pair, weight it by lifetime, and sample the sum on a fixed
//! grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One fixed-length multichannel slice of a time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalWindow {
    /// Row-major `[channels x length]` sample values.
    pub values: Vec<f64>,
    pub channels: usize,
    pub length: usize,
    pub sample_rate_hz: f64,
    pub label: Option<usize>,
}

impl SignalWindow {
    pub fn new(
        values: Vec<f64>,
        channels: usize,
        length: usize,
        sample_rate_hz: f64,
        label: Option<usize>,
    ) -> Result<Self> {
        let w = SignalWindow {
            values,
            channels,
            length,
            sample_rate_hz,
            label,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config(format!(
                "window length {} < 2",
                self.length
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("window has zero channels".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sample rate {} must be positive",
                self.sample_rate_hz
            )));
        }
        if self.values.len() != self.channels * self.length {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", self.channels * self.length),
                actual: format!("{}", self.values.len()),
            });
        }
        for c in 0..self.channels {
            for i in 0..self.length {
                if !self.values[c * self.length + i].is_finite() {
                    return Err(Error::NonFinite {
                        channel: c,
                        index: i,
                    });
                }
            }
        }
        Ok(())
    }

    /// The samples of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.length..(c + 1) * self.length]
    }
}

/// Finite birth/death pairs and the essential birth, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    /// Finite `(birth, death)` pairs per channel, `death > birth`.
    pub pairs: Vec<Vec<(f64, f64)>>,
    /// Global minimum of each channel (the never-dying component).
    pub essential_births: Vec<f64>,
    /// Global maximum of each channel; used by the `CapAtMax` essential policy.
    pub channel_maxima: Vec<f64>,
}

/// How to rasterize components that never die.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EssentialPolicy {
    /// Ignore essential births (persistence images encode finite lifetimes).
    Drop,
    /// Treat the essential birth as a pair dying at the channel maximum.
    CapAtMax,
}

/// Lifetime weighting applied to each Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiWeighting {
    /// `persistence / persistence_range.1`, clamped to `[0, 1]`.
    Linear,
    Constant,
}

/// Rasterization grid for persistence images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiConfig {
    /// Output image is `resolution x resolution`.
    pub resolution: usize,
    pub gaussian_sigma: f64,
    pub birth_range: (f64, f64),
    pub persistence_range: (f64, f64),
    pub weighting: PiWeighting,
    pub essential_policy: EssentialPolicy,
}

impl PiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config(format!(
                "PI resolution {} < 2",
                self.resolution
            )));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config(format!(
                "PI gaussian sigma {} must be positive",
                self.gaussian_sigma
            )));
        }
        if self.birth_range.0 >= self.birth_range.1 {
            return Err(Error::Config(format!(
                "birth range ({}, {}) must satisfy lo < hi",
                self.birth_range.0, self.birth_range.1
            )));
        }
        if self.persistence_range.0 >= self.persistence_range.1 {
            return Err(Error::Config(format!(
                "persistence range ({}, {}) must satisfy lo < hi",
                self.persistence_range.0, self.persistence_range.1
            )));
        }
        Ok(())
    }

    /// Default persistence axis spans the width of the birth range.
    pub fn with_default_persistence_range(mut self) -> Self {
        self.persistence_range = (0.0, self.birth_range.1 - self.birth_range.0);
        self
    }
}

impl Default for PiConfig {
    fn default() -> Self {
        PiConfig {
            resolution: 16,
            gaussian_sigma: 0.25,
            birth_range: (-2.0, 2.0),
            persistence_range: (0.0, 4.0),
            weighting: PiWeighting::Linear,
            essential_policy: EssentialPolicy::Drop,
        }
    }
}

/// Non-negative `[channels x resolution x resolution]` raster.
#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceImage {
    pub pixels: Vec<f64>,
    pub channels: usize,
    pub resolution: usize,
}

impl PersistenceImage {
    pub fn zeros(channels: usize, resolution: usize) -> Self {
        PersistenceImage {
            pixels: vec![0.0; channels * resolution * resolution],
            channels,
            resolution,
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.resolution * self.resolution;
        &self.pixels[c * n..(c + 1) * n]
    }

    pub fn max_pixel(&self) -> f64 {
        self.pixels.iter().cloned().fold(0.0, f64::max)
    }
}

/// Collapse runs of equal adjacent samples to a single vertex.
///
/// Returns `(value, first_index)` per contracted vertex. Contraction makes
/// every merge vertex strictly higher than its neighbours, so no
/// zero-persistence pair can form.
fn contract_plateaus(xs: &[f64]) -> Vec<(f64, usize)> {
    let mut out: Vec<(f64, usize)> = Vec::with_capacity(xs.len());
    for (i, &v) in xs.iter().enumerate() {
        match out.last() {
            Some(&(last, _)) if last == v => {}
            _ => out.push((v, i)),
        }
    }
    out
}

struct UnionFind {
    parent: Vec<usize>,
    /// `(birth value, birth index)` of the component root; the elder has the
    /// lexicographically smaller entry.
    birth: Vec<(f64, usize)>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            birth: vec![(f64::INFINITY, usize::MAX); n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]]; // path halving
            x = self.parent[x];
        }
        x
    }
}

fn elder(a: (f64, usize), b: (f64, usize)) -> bool {
    // true if a is older than b: smaller birth value, ties by lower index
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// 0-dimensional persistence of one channel. Returns finite pairs and the
/// essential (global-minimum) birth.
fn channel_persistence(xs: &[f64]) -> (Vec<(f64, f64)>, f64) {
    let verts = contract_plateaus(xs);
    let m = verts.len();
    if m == 1 {
        return (Vec::new(), verts[0].0);
    }

    // Process vertices in sublevel order: by value, ties by lower index.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        verts[a]
            .0
            .partial_cmp(&verts[b].0)
            .unwrap()
            .then(verts[a].1.cmp(&verts[b].1))
    });

    let mut uf = UnionFind::new(m);
    let mut active = vec![false; m];
    let mut pairs: Vec<(f64, f64)> = Vec::new();

    for &j in &order {
        let (v, idx) = verts[j];
        active[j] = true;

        // Attach to already-active neighbours; a vertex with two active
        // neighbours is a merge point where the younger component dies.
        let left = (j > 0 && active[j - 1]).then(|| uf.find(j - 1));
        let right = (j + 1 < m && active[j + 1]).then(|| uf.find(j + 1));

        match (left, right) {
            (None, None) => {
                // local minimum: new component born at v
                uf.birth[j] = (v, idx);
            }
            (Some(r), None) | (None, Some(r)) => {
                uf.parent[j] = r;
            }
            (Some(rl), Some(rr)) if rl == rr => {
                uf.parent[j] = rl;
            }
            (Some(rl), Some(rr)) => {
                let (older, younger) = if elder(uf.birth[rl], uf.birth[rr]) {
                    (rl, rr)
                } else {
                    (rr, rl)
                };
                let young_birth = uf.birth[younger].0;
                debug_assert!(v > young_birth);
                pairs.push((young_birth, v));
                uf.parent[younger] = older;
                uf.parent[j] = older;
            }
        }
    }

    // Exactly one component survives: the global minimum.
    let root = uf.find(order[0]);
    (pairs, uf.birth[root].0)
}

/// Compute the per-channel 0-dimensional sublevel-set persistence diagram of
/// a window.
///
/// Each local minimum births a component at its value; when two components
/// meet at a local maximum the younger one (higher birth, ties broken by
/// higher first index) dies at the merge value. Plateaus are contracted
/// beforehand, so every finite pair has `death > birth`.
pub fn sublevel_diagram(window: &SignalWindow) -> Result<PersistenceDiagram> {
    window.validate()?;
    let mut pairs = Vec::with_capacity(window.channels);
    let mut essential = Vec::with_capacity(window.channels);
    let mut maxima = Vec::with_capacity(window.channels);
    for c in 0..window.channels {
        let xs = window.channel(c);
        let (p, e) = channel_persistence(xs);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        pairs.push(p);
        essential.push(e);
        maxima.push(hi);
    }
    Ok(PersistenceDiagram {
        pairs,
        essential_births: essential,
        channel_maxima: maxima,
    })
}

/// Rasterize a persistence diagram on the `birth x persistence` grid.
///
/// Every finite pair `(b, d)` deposits a 2-D isotropic Gaussian of standard
/// deviation `cfg.gaussian_sigma` centred at `(b, d - b)`, evaluated at cell
/// centres and scaled by the lifetime weight. Essential births are dropped or
/// capped at the channel maximum according to `cfg.essential_policy`.
pub fn diagram_to_image(pd: &PersistenceDiagram, cfg: &PiConfig) -> Result<PersistenceImage> {
    cfg.validate()?;
    let channels = pd.pairs.len();
    let r = cfg.resolution;
    let mut img = PersistenceImage::zeros(channels, r);

    let (b_lo, b_hi) = cfg.birth_range;
    let (p_lo, p_hi) = cfg.persistence_range;
    let b_step = (b_hi - b_lo) / r as f64;
    let p_step = (p_hi - p_lo) / r as f64;
    let sigma = cfg.gaussian_sigma;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

    for c in 0..channels {
        let base = c * r * r;
        let mut splat = |birth: f64, death: f64| {
            let pers = death - birth;
            let w = match cfg.weighting {
                PiWeighting::Linear => (pers / p_hi).clamp(0.0, 1.0),
                PiWeighting::Constant => 1.0,
            };
            if w == 0.0 {
                return;
            }
            for row in 0..r {
                // row indexes the persistence axis, col the birth axis
                let pc = p_lo + (row as f64 + 0.5) * p_step;
                let dp = pc - pers;
                for col in 0..r {
                    let bc = b_lo + (col as f64 + 0.5) * b_step;
                    let db = bc - birth;
                    let g = (-(db * db + dp * dp) * inv_two_sigma_sq).exp();
                    img.pixels[base + row * r + col] += w * norm * g;
                }
            }
        };
        for &(b, d) in &pd.pairs[c] {
            splat(b, d);
        }
        if cfg.essential_policy == EssentialPolicy::CapAtMax {
            let b = pd.essential_births[c];
            let d = pd.channel_maxima[c];
            if d > b {
                splat(b, d);
            }
        }
    }
    Ok(img)
}

/// Scale an image so its global maximum over all channels is exactly 1.
/// All-zero images are returned unchanged.
pub fn normalize_image(pi: &PersistenceImage) -> PersistenceImage {
    let max = pi.max_pixel();
    if max <= 0.0 {
        return pi.clone();
    }
    let mut out = pi.clone();
    for p in &mut out.pixels {
        *p /= max;
    }
    out
}

fn extract_one(window: &SignalWindow, cfg: &PiConfig) -> Result<PersistenceImage> {
    let pd = sublevel_diagram(window)?;
    let img = diagram_to_image(&pd, cfg)?;
    Ok(normalize_image(&img))
}

fn check_uniform_channels(windows: &[SignalWindow]) -> Result<()> {
    if let Some(first) = windows.first() {
        for (i, w) in windows.iter().enumerate() {
            if w.channels != first.channels {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} channels", first.channels),
                    actual: format!("{} channels in window {}", w.channels, i),
                });
            }
        }
    }
    Ok(())
}

fn collect_indexed(results: Vec<Result<PersistenceImage>>) -> Result<Vec<PersistenceImage>> {
    let mut out = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(img) => out.push(img),
            Err(e) => return Err(e.at_window(i)),
        }
    }
    Ok(out)
}

/// Extract normalized persistence images for a batch of windows, in input
/// order. Work fans out across threads; output is identical to the
/// sequential path.
pub fn batch_extract(windows: &[SignalWindow], cfg: &PiConfig) -> Result<Vec<PersistenceImage>> {
    check_uniform_channels(windows)?;
    cfg.validate()?;
    let results: Vec<Result<PersistenceImage>> = windows
        .par_iter()
        .map(|w| extract_one(w, cfg))
        .collect();
    collect_indexed(results)
}

/// Sequential reference path for [`batch_extract`].
pub fn batch_extract_sequential(
    windows: &[SignalWindow],
    cfg: &PiConfig,
) -> Result<Vec<PersistenceImage>> {
    check_uniform_channels(windows)?;
    cfg.validate()?;
    let results: Vec<Result<PersistenceImage>> =
        windows.iter().map(|w| extract_one(w, cfg)).collect();
    collect_indexed(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window_from(channels: Vec<Vec<f64>>) -> SignalWindow {
        let length = channels[0].len();
        let n = channels.len();
        let mut values = Vec::new();
        for c in &channels {
            values.extend_from_slice(c);
        }
        SignalWindow::new(values, n, length, 100.0, None).unwrap()
    }

    /// Brute-force oracle: sweep every distinct value as a threshold, count
    /// connected components of the sublevel set, and apply the elder rule
    /// exhaustively.
    fn oracle_pairs(xs: &[f64]) -> Vec<(f64, f64)> {
        #[derive(Clone, Copy, PartialEq)]
        struct Comp {
            birth: f64,
            birth_idx: usize,
        }
        let mut thresholds: Vec<f64> = xs.to_vec();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();

        let n = xs.len();
        // comp id per index, or none if above threshold
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut comps: Vec<Comp> = Vec::new();
        let mut pairs = Vec::new();

        for &t in &thresholds {
            // runs of indices with value <= t
            let mut i = 0;
            while i < n {
                if xs[i] > t {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < n && xs[i] <= t {
                    i += 1;
                }
                let run = start..i;
                // distinct old components inside the run
                let mut olds: Vec<usize> = Vec::new();
                for j in run.clone() {
                    if let Some(c) = owner[j] {
                        if !olds.contains(&c) {
                            olds.push(c);
                        }
                    }
                }
                let survivor = if olds.is_empty() {
                    // brand new component; its minimum first index
                    let birth_idx = run.clone().find(|&j| xs[j] == t).unwrap();
                    comps.push(Comp { birth: t, birth_idx });
                    comps.len() - 1
                } else {
                    let mut best = olds[0];
                    for &c in &olds[1..] {
                        let (a, b) = (comps[c], comps[best]);
                        if a.birth < b.birth
                            || (a.birth == b.birth && a.birth_idx < b.birth_idx)
                        {
                            best = c;
                        }
                    }
                    for &c in &olds {
                        if c != best {
                            pairs.push((comps[c].birth, t));
                        }
                    }
                    best
                };
                for j in run {
                    owner[j] = Some(survivor);
                }
            }
        }
        pairs
    }

    fn sorted(mut pairs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pairs
    }

    #[test]
    fn constant_channel_has_no_pairs() {
        let pd = sublevel_diagram(&window_from(vec![vec![3.0, 3.0, 3.0, 3.0]])).unwrap();
        assert!(pd.pairs[0].is_empty());
        assert_eq!(pd.essential_births, vec![3.0]);
    }

    #[test]
    fn monotone_channel_has_no_pairs() {
        let pd = sublevel_diagram(&window_from(vec![vec![0.0, 1.0, 2.0, 3.0]])).unwrap();
        assert!(pd.pairs[0].is_empty());
        assert_eq!(pd.essential_births, vec![0.0]);
    }

    #[test]
    fn single_merge_matches_threshold_sweep() {
        let xs = vec![0.0, 2.0, 1.0, 3.0];
        let pd = sublevel_diagram(&window_from(vec![xs.clone()])).unwrap();
        assert_eq!(pd.pairs[0], vec![(1.0, 2.0)]);
        assert_eq!(pd.essential_births, vec![0.0]);
        assert_eq!(sorted(pd.pairs[0].clone()), sorted(oracle_pairs(&xs)));
    }

    #[test]
    fn nonfinite_sample_is_rejected_with_location() {
        let mut w = window_from(vec![vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0]]);
        w.values[3 + 1] = f64::NAN; // channel 1, index 1
        match sublevel_diagram(&w) {
            Err(Error::NonFinite { channel, index }) => {
                assert_eq!((channel, index), (1, 1));
            }
            other => panic!("expected NonFinite error, got {other:?}"),
        }
    }

    fn strict_local_minima_contracted(xs: &[f64]) -> usize {
        let v = contract_plateaus(xs);
        let m = v.len();
        if m == 1 {
            return 1;
        }
        let mut count = 0;
        for i in 0..m {
            let left_ok = i == 0 || v[i - 1].0 > v[i].0;
            let right_ok = i + 1 == m || v[i + 1].0 > v[i].0;
            if left_ok && right_ok {
                count += 1;
            }
        }
        count
    }

    proptest! {
        #[test]
        fn matches_oracle_on_random_integer_channels(
            xs in prop::collection::vec(0i32..10, 2..64)
        ) {
            let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
            let pd = sublevel_diagram(&window_from(vec![xs.clone()])).unwrap();
            prop_assert_eq!(sorted(pd.pairs[0].clone()), sorted(oracle_pairs(&xs)));
        }

        #[test]
        fn pair_count_is_minima_minus_one(
            xs in prop::collection::vec(0i32..10, 2..64)
        ) {
            let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
            let pd = sublevel_diagram(&window_from(vec![xs.clone()])).unwrap();
            prop_assert_eq!(pd.pairs[0].len() + 1, strict_local_minima_contracted(&xs));
        }

        #[test]
        fn births_and_deaths_are_sample_values(
            xs in prop::collection::vec(-5i32..5, 2..48)
        ) {
            let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
            let pd = sublevel_diagram(&window_from(vec![xs.clone()])).unwrap();
            for &(b, d) in &pd.pairs[0] {
                prop_assert!(d > b);
                prop_assert!(xs.contains(&b));
                prop_assert!(xs.contains(&d));
            }
        }
    }

    fn single_pair_cfg() -> PiConfig {
        PiConfig {
            resolution: 2,
            gaussian_sigma: 0.25,
            birth_range: (0.0, 2.0),
            persistence_range: (0.0, 2.0),
            weighting: PiWeighting::Linear,
            essential_policy: EssentialPolicy::Drop,
        }
    }

    fn diagram_with(pairs: Vec<(f64, f64)>) -> PersistenceDiagram {
        PersistenceDiagram {
            pairs: vec![pairs],
            essential_births: vec![0.0],
            channel_maxima: vec![0.0],
        }
    }

    #[test]
    fn empty_diagram_gives_zero_image() {
        let img = diagram_to_image(&diagram_with(vec![]), &single_pair_cfg()).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn single_pair_matches_direct_gaussian_evaluation() {
        // pair (1, 2) -> centre (1, 1); grid cells centred at 0.5 and 1.5
        let cfg = single_pair_cfg();
        let img = diagram_to_image(&diagram_with(vec![(1.0, 2.0)]), &cfg).unwrap();
        let sigma = cfg.gaussian_sigma;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let w = 1.0f64 / 2.0; // persistence 1 over range hi 2
        let centres = [0.5, 1.5];
        let mut expected = vec![0.0; 4];
        for (row, &pc) in centres.iter().enumerate() {
            for (col, &bc) in centres.iter().enumerate() {
                let d2 = (bc - 1.0f64).powi(2) + (pc - 1.0f64).powi(2);
                expected[row * 2 + col] = w * norm * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        for (a, e) in img.pixels.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15, "pixel {a} vs {e}");
        }
        // max pixel is the cell whose centre is nearest (1, 1): all four are
        // equidistant here, so perturb the pair slightly to break the tie.
        let img = diagram_to_image(&diagram_with(vec![(0.6, 1.2)]), &cfg).unwrap();
        let argmax = img
            .pixels
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 0); // centre (0.5, 0.6) -> row 0 (pers), col 0 (birth)
    }

    #[test]
    fn additivity_of_rasterization() {
        let cfg = PiConfig::default();
        let all = vec![(0.1, 0.9), (-1.0, 1.5), (0.4, 2.0)];
        let img_all = diagram_to_image(&diagram_with(all.clone()), &cfg).unwrap();
        let img_a = diagram_to_image(&diagram_with(all[..1].to_vec()), &cfg).unwrap();
        let img_b = diagram_to_image(&diagram_with(all[1..].to_vec()), &cfg).unwrap();
        for i in 0..img_all.pixels.len() {
            let sum = img_a.pixels[i] + img_b.pixels[i];
            assert!((img_all.pixels[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_leaves_zero_image_alone_and_scales_max_to_one() {
        let zero = PersistenceImage::zeros(2, 4);
        assert_eq!(normalize_image(&zero), zero);

        let mut img = PersistenceImage::zeros(1, 2);
        img.pixels = vec![1.0, 4.0, 2.0, 0.5];
        let n = normalize_image(&img);
        assert_eq!(n.pixels, vec![0.25, 1.0, 0.5, 0.125]);
    }

    #[test]
    fn normalize_preserves_argmax() {
        let cfg = single_pair_cfg();
        let img = diagram_to_image(&diagram_with(vec![(0.6, 1.2)]), &cfg).unwrap();
        let argmax = |p: &[f64]| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&img.pixels), argmax(&normalize_image(&img).pixels));
    }

    #[test]
    fn wide_birth_range_config_rasterizes() {
        // sigma 0.25 with birth range (-10, 10), persistence range spanning
        // the birth width
        let cfg = PiConfig {
            resolution: 16,
            gaussian_sigma: 0.25,
            birth_range: (-10.0, 10.0),
            persistence_range: (0.0, 1.0),
            weighting: PiWeighting::Linear,
            essential_policy: EssentialPolicy::Drop,
        }
        .with_default_persistence_range();
        cfg.validate().unwrap();
        assert_eq!(cfg.persistence_range, (0.0, 20.0));
        let img = diagram_to_image(&diagram_with(vec![(-4.0, 3.0)]), &cfg).unwrap();
        assert!(img.max_pixel() > 0.0);
    }

    #[test]
    fn cap_at_max_adds_the_essential_pair() {
        let pd = PersistenceDiagram {
            pairs: vec![vec![]],
            essential_births: vec![0.0],
            channel_maxima: vec![1.0],
        };
        let mut cfg = single_pair_cfg();
        let dropped = diagram_to_image(&pd, &cfg).unwrap();
        assert!(dropped.pixels.iter().all(|&p| p == 0.0));
        cfg.essential_policy = EssentialPolicy::CapAtMax;
        let capped = diagram_to_image(&pd, &cfg).unwrap();
        assert!(capped.max_pixel() > 0.0);
    }

    #[test]
    fn batch_extract_empty_and_deterministic() {
        let cfg = PiConfig::default();
        assert!(batch_extract(&[], &cfg).unwrap().is_empty());

        let w = window_from(vec![vec![0.0, 2.0, 1.0, 3.0], vec![1.0, 0.0, 2.0, 0.5]]);
        let windows = vec![w.clone(), w.clone(), w];
        let imgs = batch_extract(&windows, &cfg).unwrap();
        assert_eq!(imgs.len(), 3);
        assert_eq!(imgs[0], imgs[1]);
        assert_eq!(imgs[1], imgs[2]);
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cfg = PiConfig::default();
        let windows: Vec<SignalWindow> = (0..100)
            .map(|_| {
                let xs: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
                window_from(vec![xs])
            })
            .collect();
        let par = batch_extract(&windows, &cfg).unwrap();
        let seq = batch_extract_sequential(&windows, &cfg).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn batch_error_names_offending_window() {
        let good = window_from(vec![vec![0.0, 1.0]]);
        let mut bad = window_from(vec![vec![0.0, 1.0]]);
        bad.values[1] = f64::INFINITY;
        let err = batch_extract(&[good, bad], &PiConfig::default()).unwrap_err();
        match err {
            Error::Window { index, .. } => assert_eq!(index, 1),
            other => panic!("expected Window error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn permuting_channels_permutes_image_channels(
            a in prop::collection::vec(-3i32..3, 8),
            b in prop::collection::vec(-3i32..3, 8)
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let cfg = PiConfig::default();
            let ab = extract_one(&window_from(vec![a.clone(), b.clone()]), &cfg).unwrap();
            let ba = extract_one(&window_from(vec![b, a]), &cfg).unwrap();
            prop_assert_eq!(ab.channel(0), ba.channel(1));
            prop_assert_eq!(ab.channel(1), ba.channel(0));
        }
    }
}
