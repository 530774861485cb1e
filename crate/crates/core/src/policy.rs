//! Linear softmax policy over a discrete action catalog.
//!
//! The catalog discretizes the zoom tool: four answers, the 3×3 grid of the
//! current view, the 3×3 grid of `image_0`, and a step back out to the
//! parent view. Logits are `W x` for a featurized episode state `x`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{NormBox, PixelRect, GRID};
use crate::protocol::{Action, ToolCall, ROOT_IMAGE};
use crate::rewards::cell_tag;
use crate::scenes::{child_rect, EpisodeState, OPTION_LETTERS};

pub const CATALOG_SIZE: usize = 23;
pub const FEATURE_DIM: usize = 36;

const LOCAL_BASE: usize = 4;
const GLOBAL_BASE: usize = 13;
const BACKTRACK: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CatalogAction {
    Answer(usize),
    LocalZoom(usize),
    GlobalZoom(usize),
    BacktrackToParent,
}

impl CatalogAction {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0..LOCAL_BASE => Some(Self::Answer(i)),
            LOCAL_BASE..GLOBAL_BASE => Some(Self::LocalZoom(i - LOCAL_BASE)),
            GLOBAL_BASE..BACKTRACK => Some(Self::GlobalZoom(i - GLOBAL_BASE)),
            BACKTRACK => Some(Self::BacktrackToParent),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Self::Answer(k) => k,
            Self::LocalZoom(c) => LOCAL_BASE + c,
            Self::GlobalZoom(c) => GLOBAL_BASE + c,
            Self::BacktrackToParent => BACKTRACK,
        }
    }

    pub fn is_answer(self) -> bool {
        matches!(self, Self::Answer(_))
    }
}

/// Box twice the size of `b` around its center, shifted back inside the frame.
pub fn expand_box(b: &NormBox) -> NormBox {
    let grow = |lo: u32, hi: u32| -> (u32, u32) {
        let len = (2 * (hi - lo)).min(GRID);
        let center2 = lo + hi; // twice the center
        let start = (center2 as i64 - len as i64) / 2;
        let start = start.clamp(0, i64::from(GRID - len)) as u32;
        (start, start + len)
    };
    let (x0, x1) = grow(b.x_min(), b.x_max());
    let (y0, y1) = grow(b.y_min(), b.y_max());
    NormBox::new(x0.into(), y0.into(), x1.into(), y1.into()).expect("expanded box is valid")
}

/// Protocol action realising catalog entry `a` in `state`.
pub fn render_catalog_action(state: &EpisodeState, a: CatalogAction) -> Action {
    let current = state.current_view();
    let call = |source: &str, bbox: NormBox, reason: String| {
        Action::ToolCall(ToolCall {
            source_image_id: source.to_owned(),
            reason,
            bbox,
        })
    };
    match a {
        CatalogAction::Answer(k) => Action::Answer {
            content: OPTION_LETTERS[k].to_owned(),
        },
        CatalogAction::LocalZoom(c) => call(
            &current.image_id,
            NormBox::grid_cell(c),
            format!("Inspect the {} region of {}.", cell_tag(c), current.image_id),
        ),
        CatalogAction::GlobalZoom(c) => call(
            ROOT_IMAGE,
            NormBox::grid_cell(c),
            format!("Inspect the {} region of {ROOT_IMAGE}.", cell_tag(c)),
        ),
        CatalogAction::BacktrackToParent => match state.parent(current) {
            Some(parent) => call(
                &parent.image_id,
                expand_box(&current.local_box),
                format!("Widen the view around {} within {}.", current.image_id, parent.image_id),
            ),
            // The root has no parent; a full-frame re-crop is the closest
            // expressible request and is rejected by validation.
            None => call(ROOT_IMAGE, NormBox::FULL, "Widen the view.".to_owned()),
        },
    }
}

/// Catalog entry whose rendering equals `action` in `state`, if any.
pub fn catalog_index_of(state: &EpisodeState, action: &Action) -> Option<usize> {
    (0..CATALOG_SIZE).find(|&i| {
        let rendered = render_catalog_action(state, CatalogAction::from_index(i).unwrap());
        match (&rendered, action) {
            (Action::ToolCall(r), Action::ToolCall(a)) => {
                r.source_image_id == a.source_image_id && r.bbox == a.bbox
            }
            (Action::Answer { content: r }, Action::Answer { content: a }) => r == a,
            _ => false,
        }
    })
}

pub type FeatureVector = [f64; FEATURE_DIM];

fn cell_rects(view: &PixelRect) -> [PixelRect; 9] {
    std::array::from_fn(|c| child_rect(view, &NormBox::grid_cell(c)))
}

/// Deterministic state features, every entry in `[-1, 1]`:
/// category one-hot (4), round fraction (1), current box in the `image_0`
/// frame (4), per-option confirmation by read evidence (4), last transition
/// one-hot (4), unread-target cues over the current view's grid (9),
/// unread-target cues over `image_0` cells outside the current view (9),
/// bias (1).
pub fn featurize(state: &EpisodeState) -> FeatureVector {
    let mut x = [0.0; FEATURE_DIM];
    let q = &state.question;
    x[q.category.index()] = 1.0;
    x[4] = (state.round as f64 / state.config.round_limit.max(1) as f64).min(1.0);
    let view = state.current_view();
    for (i, v) in view.global_box.to_array().iter().enumerate() {
        x[5 + i] = f64::from(*v) / f64::from(GRID);
    }
    let n_targets = q.targets.len().max(1) as f64;
    for (k, choice) in q.choices.iter().take(4).enumerate() {
        let parts: Vec<&str> = choice.split('+').collect();
        let confirmed = q
            .targets
            .iter()
            .enumerate()
            .filter(|(j, &t)| state.read[t] && parts.get(*j) == Some(&state.scene.evidence[t].label.as_str()))
            .count();
        x[9 + k] = confirmed as f64 / n_targets;
    }
    if let Some(t) = state.last_transition {
        x[13 + t.index()] = 1.0;
    }
    let unread: Vec<&PixelRect> = q
        .targets
        .iter()
        .filter(|&&t| !state.read[t])
        .map(|&t| &state.scene.evidence[t].region)
        .collect();
    for (c, cell) in cell_rects(&view.pixel_rect).iter().enumerate() {
        if unread.iter().any(|r| r.intersects(cell)) {
            x[17 + c] = 1.0;
        }
    }
    let root = state.scene.frame();
    for (c, cell) in cell_rects(&root).iter().enumerate() {
        if unread
            .iter()
            .any(|r| r.intersects(cell) && !r.intersects(&view.pixel_rect))
        {
            x[26 + c] = 1.0;
        }
    }
    x[35] = 1.0;
    x
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("non-finite logits")]
    NonFinite,
    #[error("no demonstrations to clone")]
    EmptyDemos,
    #[error("checkpoint shape {0}x{1} does not match catalog {CATALOG_SIZE}x{FEATURE_DIM}")]
    Shape(usize, usize),
}

/// Policy weights, one row per catalog action.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub weights: Vec<[f64; FEATURE_DIM]>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PolicyParams {
    pub fn zeros() -> Self {
        Self {
            weights: vec![[0.0; FEATURE_DIM]; CATALOG_SIZE],
        }
    }

    pub fn logits(&self, x: &FeatureVector) -> [f64; CATALOG_SIZE] {
        std::array::from_fn(|a| self.weights[a].iter().zip(x).map(|(w, v)| w * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().flatten().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, g: &Gradient, scale: f64) {
        for (row, grow) in self.weights.iter_mut().zip(&g.0) {
            for (w, d) in row.iter_mut().zip(grow) {
                *w += scale * d;
            }
        }
    }

}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk form of [`PolicyParams`]: a row-major JSON matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub catalog_size: usize,
    pub feature_dim: usize,
    pub weights: Vec<Vec<f64>>,
}

impl From<&PolicyParams> for Checkpoint {
    fn from(p: &PolicyParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            catalog_size: CATALOG_SIZE,
            feature_dim: FEATURE_DIM,
            weights: p.weights.iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl TryFrom<Checkpoint> for PolicyParams {
    type Error = PolicyError;
    fn try_from(c: Checkpoint) -> Result<Self, Self::Error> {
        let cols = c.weights.first().map_or(0, Vec::len);
        if c.weights.len() != CATALOG_SIZE || c.weights.iter().any(|r| r.len() != FEATURE_DIM) {
            return Err(PolicyError::Shape(c.weights.len(), cols));
        }
        let params = PolicyParams {
            weights: c
                .weights
                .iter()
                .map(|r| std::array::from_fn(|j| r[j]))
                .collect(),
        };
        if !params.is_finite() {
            return Err(PolicyError::NonFinite);
        }
        Ok(params)
    }
}

/// A dense gradient with the shape of [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<[f64; FEATURE_DIM]>);

impl Default for Gradient {
    fn default() -> Self {
        Self::zeros()
    }
}

impl Gradient {
    pub fn zeros() -> Self {
        Self(vec![[0.0; FEATURE_DIM]; CATALOG_SIZE])
    }

    /// `self += scale * (coef ⊗ x)` for a per-action coefficient vector.
    pub fn add_outer(&mut self, coef: &[f64; CATALOG_SIZE], x: &FeatureVector, scale: f64) {
        for (row, c) in self.0.iter_mut().zip(coef) {
            let s = scale * c;
            if s != 0.0 {
                for (g, v) in row.iter_mut().zip(x) {
                    *g += s * v;
                }
            }
        }
    }

    pub fn add(&mut self, other: &Gradient, scale: f64) {
        for (row, orow) in self.0.iter_mut().zip(&other.0) {
            for (g, o) in row.iter_mut().zip(orow) {
                *g += scale * o;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn get(&self, a: usize, j: usize) -> f64 {
        self.0[a][j]
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64; CATALOG_SIZE]) -> Result<[f64; CATALOG_SIZE], PolicyError> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: [f64; CATALOG_SIZE] = std::array::from_fn(|i| (logits[i] - m).exp());
    let z: f64 = exps.iter().sum();
    Ok(std::array::from_fn(|i| exps[i] / z))
}

pub fn action_distribution(params: &PolicyParams, x: &FeatureVector) -> Result<[f64; CATALOG_SIZE], PolicyError> {
    softmax(&params.logits(x))
}

/// Log-probability via log-sum-exp.
pub fn log_prob(params: &PolicyParams, x: &FeatureVector, a: usize) -> Result<f64, PolicyError> {
    let l = params.logits(x);
    if l.iter().any(|v| !v.is_finite()) {
        return Err(PolicyError::NonFinite);
    }
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(l[a] - lse)
}

/// `(onehot(a) - p) ⊗ x`, the exact gradient of `log π(a | x)`.
pub fn grad_log_prob(params: &PolicyParams, x: &FeatureVector, a: usize) -> Result<Gradient, PolicyError> {
    let p = action_distribution(params, x)?;
    let mut coef = p.map(|v| -v);
    coef[a] += 1.0;
    let mut g = Gradient::zeros();
    g.add_outer(&coef, x, 1.0);
    Ok(g)
}

/// Draw an action index from `p` by inverse CDF.
pub fn sample_index(p: &[f64; CATALOG_SIZE], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave the total a hair below 1.
    p.iter()
        .rposition(|v| *v > 0.0)
        .unwrap_or(CATALOG_SIZE - 1)
}

pub fn argmax(p: &[f64; CATALOG_SIZE]) -> usize {
    let mut best = 0;
    for i in 1..CATALOG_SIZE {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

pub type Demo = (FeatureVector, usize);

/// Mean log-likelihood of the demonstrations and its gradient.
pub fn demo_log_likelihood(params: &PolicyParams, demos: &[Demo]) -> Result<(f64, Gradient), PolicyError> {
    if demos.is_empty() {
        return Err(PolicyError::EmptyDemos);
    }
    let n = demos.len() as f64;
    let mut total = 0.0;
    let mut g = Gradient::zeros();
    for (x, a) in demos {
        let p = action_distribution(params, x)?;
        total += p[*a].ln();
        let mut coef = p.map(|v| -v);
        coef[*a] += 1.0;
        g.add_outer(&coef, x, 1.0 / n);
    }
    Ok((total / n, g))
}

/// Full-batch gradient ascent on the mean demo log-likelihood.
///
/// Returns the trained params and the log-likelihood before each epoch
/// followed by the final value (`epochs + 1` entries).
pub fn behavior_clone(
    params: &PolicyParams,
    demos: &[Demo],
    lr: f64,
    epochs: usize,
) -> Result<(PolicyParams, Vec<f64>), PolicyError> {
    if demos.is_empty() {
        return Err(PolicyError::EmptyDemos);
    }
    let mut p = params.clone();
    let mut curve = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let (ll, g) = demo_log_likelihood(&p, demos)?;
        curve.push(ll);
        p.add_scaled(&g, lr);
    }
    curve.push(demo_log_likelihood(&p, demos)?.0);
    Ok((p, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TransitionKind;
    use crate::protocol::{validate_against, RawToolCall};
    use crate::scenes::{generate_for, Category, EpisodeConfig, SceneConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(category: Category, seed: u64) -> EpisodeState {
        let (s, q) = generate_for(seed, &SceneConfig::default(), category).unwrap();
        EpisodeState::new(s, q, EpisodeConfig::default())
    }

    fn random_params(rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
        PolicyParams {
            weights: (0..CATALOG_SIZE)
                .map(|_| std::array::from_fn(|_| rng.random_range(-scale..scale)))
                .collect(),
        }
    }

    fn random_features(rng: &mut ChaCha8Rng) -> FeatureVector {
        std::array::from_fn(|_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn catalog_is_a_bijection() {
        for i in 0..CATALOG_SIZE {
            assert_eq!(CatalogAction::from_index(i).unwrap().index(), i);
        }
        assert!(CatalogAction::from_index(CATALOG_SIZE).is_none());
    }

    #[test]
    fn zoom_entries_render_valid_calls() {
        let mut st = state(Category::Tiny, 1);
        st.step("", &render_catalog_action(&st, CatalogAction::LocalZoom(4))).unwrap();
        for i in LOCAL_BASE..CATALOG_SIZE {
            let a = render_catalog_action(&st, CatalogAction::from_index(i).unwrap());
            let call = a.as_tool_call().unwrap();
            let verdict = validate_against(st.history(), &RawToolCall::from(call), 0.5);
            // Re-cropping the explored centre cell of image_0 is a revisit.
            assert_eq!(verdict.is_ok(), i != GLOBAL_BASE + 4, "{i}");
        }
    }

    #[test]
    fn backtrack_widens_and_root_backtrack_is_rejected() {
        let mut st = state(Category::Tiny, 2);
        let root = render_catalog_action(&st, CatalogAction::BacktrackToParent);
        let raw = RawToolCall::from(root.as_tool_call().unwrap());
        assert!(validate_against(st.history(), &raw, 0.5).is_err());
        st.step("", &render_catalog_action(&st, CatalogAction::LocalZoom(0))).unwrap();
        st.step("", &render_catalog_action(&st, CatalogAction::LocalZoom(8))).unwrap();
        st.step("", &render_catalog_action(&st, CatalogAction::BacktrackToParent)).unwrap();
        assert_eq!(st.last_transition, Some(TransitionKind::Backtrack));
        assert_eq!(expand_box(&NormBox::grid_cell(8)).to_array(), [334, 334, 1000, 1000]);
        assert_eq!(expand_box(&NormBox::grid_cell(4)).to_array(), [166, 166, 834, 834]);
    }

    #[test]
    fn catalog_index_inverts_rendering() {
        let st = state(Category::MultiHop, 3);
        for i in 0..CATALOG_SIZE {
            let a = render_catalog_action(&st, CatalogAction::from_index(i).unwrap());
            let back = catalog_index_of(&st, &a).unwrap();
            // At the root, local and image_0 cells coincide.
            if (GLOBAL_BASE..BACKTRACK).contains(&i) {
                assert_eq!(back, i - GLOBAL_BASE + LOCAL_BASE);
            } else {
                assert_eq!(back, i);
            }
        }
    }

    #[test]
    fn featurize_examples() {
        let st = state(Category::Tiny, 4);
        let x = featurize(&st);
        assert_eq!(x, featurize(&st));
        assert_eq!(&x[5..9], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&x[9..13], &[0.0; 4]);
        assert_eq!(x[2], 1.0);
        assert_eq!(x[35], 1.0);
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(x[17..26].iter().sum::<f64>(), 1.0, "tiny target fits one top-level cell");

        let g = state(Category::Global, 4);
        let xg = featurize(&g);
        let truth = g.question.options.iter().position(|o| *o == g.question.ground_truth).unwrap();
        assert_eq!(xg[9 + truth], 1.0);
    }

    #[test]
    fn softmax_examples() {
        let x = [0.5; FEATURE_DIM];
        let p = action_distribution(&PolicyParams::zeros(), &x).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 23.0).abs() < 1e-15));
        let mut l = [0.0; CATALOG_SIZE];
        l[5] = 10.0;
        let p = softmax(&l).unwrap();
        assert!(p[5] > 0.99);
        let shifted = softmax(&l.map(|v| v + 123.0)).unwrap();
        for (a, b) in p.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        l[0] = f64::NAN;
        assert_eq!(softmax(&l), Err(PolicyError::NonFinite));
    }

    #[test]
    fn gradient_rows_sum_to_zero_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_features(&mut rng);
        let g = grad_log_prob(&PolicyParams::zeros(), &x, 7).unwrap();
        for j in 0..FEATURE_DIM {
            let s: f64 = (0..CATALOG_SIZE).map(|a| g.get(a, j)).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_vanishes_in_the_deterministic_limit() {
        let mut p = PolicyParams::zeros();
        p.weights[3][35] = 60.0;
        let mut x = [0.0; FEATURE_DIM];
        x[35] = 1.0;
        assert!(grad_log_prob(&p, &x, 3).unwrap().max_abs() < 1e-20);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-5;
        for _ in 0..100 {
            let params = random_params(&mut rng, 1.0);
            let x = random_features(&mut rng);
            let a = rng.random_range(0..CATALOG_SIZE);
            let g = grad_log_prob(&params, &x, a).unwrap();
            for _ in 0..8 {
                let (r, c) = (rng.random_range(0..CATALOG_SIZE), rng.random_range(0..FEATURE_DIM));
                let mut plus = params.clone();
                plus.weights[r][c] += h;
                let mut minus = params.clone();
                minus.weights[r][c] -= h;
                let fd = (log_prob(&plus, &x, a).unwrap() - log_prob(&minus, &x, a).unwrap()) / (2.0 * h);
                let an = g.get(r, c);
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn cloning_separable_demos_recovers_labels() {
        let mut demos = Vec::new();
        for k in 0..6 {
            let mut x = [0.0; FEATURE_DIM];
            x[17 + k] = 1.0;
            demos.push((x, k * 3 % CATALOG_SIZE + 1));
        }
        let (p, curve) = behavior_clone(&PolicyParams::zeros(), &demos, 0.5, 200).unwrap();
        for (x, a) in &demos {
            assert_eq!(argmax(&action_distribution(&p, x).unwrap()), *a);
        }
        assert!(curve.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn cloning_edge_cases() {
        assert_eq!(behavior_clone(&PolicyParams::zeros(), &[], 0.1, 5), Err(PolicyError::EmptyDemos));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = random_params(&mut rng, 0.3);
        let demos = vec![(random_features(&mut rng), 2), (random_features(&mut rng), 9)];
        let (p, curve) = behavior_clone(&init, &demos, 0.1, 0).unwrap();
        assert_eq!(p, init);
        assert_eq!(curve.len(), 1);
        let doubled: Vec<Demo> = demos.iter().chain(&demos).cloned().collect();
        let a = demo_log_likelihood(&init, &demos).unwrap().0;
        let b = demo_log_likelihood(&init, &doubled).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 2.0);
        let json = serde_json::to_string(&Checkpoint::from(&p)).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(PolicyParams::try_from(back).unwrap(), p);
        let mut bad = Checkpoint::from(&p);
        bad.weights.pop();
        assert!(PolicyParams::try_from(bad).is_err());
    }

    #[test]
    fn sampling_follows_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = [0.0; CATALOG_SIZE];
        p[2] = 0.25;
        p[10] = 0.75;
        let hits = (0..20_000).filter(|_| sample_index(&p, &mut rng) == 10).count();
        assert!((hits as f64 / 20_000.0 - 0.75).abs() < 0.02);
    }

    proptest! {
        #[test]
        fn distributions_are_normalized(seed in any::<u64>(), scale in 0.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&mut rng, scale.max(1e-9));
            let x = random_features(&mut rng);
            let p = action_distribution(&params, &x).unwrap();
            prop_assert!(p.iter().all(|v| *v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let l = params.logits(&x);
            let shifted = softmax(&l.map(|v| v - 7.5)).unwrap();
            prop_assert_eq!(argmax(&shifted), argmax(&p));
        }
    }
}
