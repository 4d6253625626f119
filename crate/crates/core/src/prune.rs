//! Channel scoring, global mask selection, and the Slimming / SWD schedules.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::cost::count_params;
use crate::deps::DependencyPartition;
use crate::error::{Error, Result};
use crate::graph::GraphModel;
use crate::shrink::shrink;
use crate::tensor::Tensor;

pub const MASK_FORMAT_VERSION: u32 = 1;

/// Tolerance on the achieved removed-parameter fraction.
pub const PARAM_BUDGET_TOLERANCE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelScore {
    pub group: String,
    pub channel: usize,
    pub score: f64,
}

/// Kept channel indices per prunable group. Groups not listed keep all
/// channels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub kept: BTreeMap<String, Vec<usize>>,
}

impl PruneMask {
    /// A mask listing every prunable group in full.
    pub fn keep_all(partition: &DependencyPartition) -> Self {
        Self {
            kept: partition
                .prunable()
                .map(|g| (g.id.clone(), (0..g.channels).collect()))
                .collect(),
        }
    }

    /// Channels removed from each group under this mask.
    pub fn removed(&self, partition: &DependencyPartition) -> BTreeMap<String, Vec<usize>> {
        partition
            .prunable()
            .map(|g| {
                let removed = match self.kept.get(&g.id) {
                    Some(kept) => {
                        let kept: BTreeSet<usize> = kept.iter().copied().collect();
                        (0..g.channels).filter(|c| !kept.contains(c)).collect()
                    }
                    None => Vec::new(),
                };
                (g.id.clone(), removed)
            })
            .collect()
    }

    pub fn removed_count(&self, partition: &DependencyPartition) -> usize {
        self.removed(partition).values().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetKind {
    ChannelFraction,
    ParameterFraction,
}

/// Result of [`select_mask`].
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub mask: PruneMask,
    pub budget_kind: BudgetKind,
    pub target: f64,
    /// Removed fraction actually reached: channels or headline parameters.
    pub achieved_fraction: f64,
    /// False when the parameter target could not be met within tolerance.
    pub achievable: bool,
}

/// On-disk mask: kept indices per group plus the selection header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub format_version: u32,
    pub budget_kind: BudgetKind,
    pub target: f64,
    pub achieved_fraction: f64,
    pub achievable: bool,
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl MaskFile {
    pub fn from_selection(s: &Selection) -> Self {
        Self {
            format_version: MASK_FORMAT_VERSION,
            budget_kind: s.budget_kind,
            target: s.target,
            achieved_fraction: s.achieved_fraction,
            achievable: s.achievable,
            groups: s.mask.kept.clone(),
        }
    }

    pub fn mask(&self) -> PruneMask {
        PruneMask {
            kept: self.groups.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask serializes")
    }

    /// Parse and check the header. Group contents are checked against a
    /// partition by [`DependencyPartition::check_mask`].
    pub fn from_json(text: &str) -> Result<Self> {
        let m: MaskFile = serde_json::from_str(text)?;
        if m.format_version != MASK_FORMAT_VERSION {
            return Err(Error::InvalidMask(format!(
                "unsupported mask format_version {}",
                m.format_version
            )));
        }
        if !m.target.is_finite() || !m.achieved_fraction.is_finite() {
            return Err(Error::InvalidMask("non-finite target or achieved fraction".into()));
        }
        Ok(m)
    }
}

/// |γ| of the BN attached to each prunable group, in group-id order.
pub fn score_channels(model: &GraphModel, partition: &DependencyPartition) -> Result<Vec<ChannelScore>> {
    let mut out = Vec::new();
    for g in partition.prunable() {
        let bn = g.bn.as_deref().expect("prunable groups have a BN");
        let node = model
            .node(bn)
            .ok_or_else(|| Error::InvalidGraph(format!("missing BatchNorm `{bn}`")))?;
        let gamma = model.float_param(&node.inputs[1])?;
        if gamma.len() != g.channels {
            return Err(Error::InvalidGraph(format!(
                "BatchNorm `{bn}` scale has {} entries, group has {} channels",
                gamma.len(),
                g.channels
            )));
        }
        out.extend(gamma.data().iter().enumerate().map(|(c, &v)| ChannelScore {
            group: g.id.clone(),
            channel: c,
            score: (v as f64).abs(),
        }));
    }
    Ok(out)
}

/// Knobs for [`select_mask_with`].
#[derive(Clone, Debug)]
pub struct SelectOptions<'a> {
    pub min_keep: usize,
    /// Channels already removed by an earlier round are ranked first.
    pub prior: Option<&'a PruneMask>,
}

impl Default for SelectOptions<'_> {
    fn default() -> Self {
        Self {
            min_keep: 1,
            prior: None,
        }
    }
}

/// Global mask selection with `min_keep = 1`.
pub fn select_mask(
    model: &GraphModel,
    partition: &DependencyPartition,
    scores: &[ChannelScore],
    target: f64,
    kind: BudgetKind,
) -> Result<Selection> {
    select_mask_with(model, partition, scores, target, kind, &SelectOptions::default())
}

/// Removal order: ascending `(score, group, channel)`, skipping channels
/// whose removal would leave a group below `min_keep`.
fn removal_order(
    partition: &DependencyPartition,
    scores: &[ChannelScore],
    opts: &SelectOptions<'_>,
) -> Result<Vec<(String, usize)>> {
    let mut seen = BTreeSet::new();
    for s in scores {
        let g = partition
            .groups
            .get(&s.group)
            .filter(|g| g.kind == crate::deps::GroupKind::Prunable)
            .ok_or_else(|| Error::InvalidArgument(format!("score for non-prunable group `{}`", s.group)))?;
        if s.channel >= g.channels || !seen.insert((s.group.as_str(), s.channel)) {
            return Err(Error::InvalidArgument(format!(
                "bad or duplicate score for `{}` channel {}",
                s.group, s.channel
            )));
        }
        if s.score.is_nan() || s.score < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "score for `{}` channel {} is {}",
                s.group, s.channel, s.score
            )));
        }
    }
    let prior_removed: BTreeSet<(String, usize)> = match opts.prior {
        Some(p) => p
            .removed(partition)
            .into_iter()
            .flat_map(|(g, cs)| cs.into_iter().map(move |c| (g.clone(), c)))
            .collect(),
        None => BTreeSet::new(),
    };
    let mut ranked: Vec<&ChannelScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        let pa = !prior_removed.contains(&(a.group.clone(), a.channel));
        let pb = !prior_removed.contains(&(b.group.clone(), b.channel));
        pa.cmp(&pb)
            .then(a.score.total_cmp(&b.score))
            .then_with(|| a.group.cmp(&b.group))
            .then(a.channel.cmp(&b.channel))
    });
    // Channels without a score are never removed, so they count as kept.
    let mut remaining: BTreeMap<&str, usize> = partition.prunable().map(|g| (g.id.as_str(), g.channels)).collect();
    let mut order = Vec::new();
    for s in ranked {
        let r = remaining.get_mut(s.group.as_str()).expect("validated above");
        if *r > opts.min_keep.max(1) {
            *r -= 1;
            order.push((s.group.clone(), s.channel));
        }
    }
    Ok(order)
}

fn mask_from_prefix(partition: &DependencyPartition, order: &[(String, usize)]) -> PruneMask {
    let mut removed: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for (g, c) in order {
        removed.entry(g.as_str()).or_default().insert(*c);
    }
    PruneMask {
        kept: partition
            .prunable()
            .map(|g| {
                let r = removed.get(g.id.as_str());
                let kept = (0..g.channels).filter(|c| r.is_none_or(|r| !r.contains(c))).collect();
                (g.id.clone(), kept)
            })
            .collect(),
    }
}

/// Removed headline-parameter fraction of `model` under `mask`, counted on
/// the actually shrunk graph.
pub fn removed_param_fraction(model: &GraphModel, partition: &DependencyPartition, mask: &PruneMask) -> Result<f64> {
    let before = count_params(model).headline;
    if before == 0 {
        return Ok(0.0);
    }
    let after = count_params(&shrink(model, partition, mask)?.model).headline;
    Ok(1.0 - after as f64 / before as f64)
}

pub fn select_mask_with(
    model: &GraphModel,
    partition: &DependencyPartition,
    scores: &[ChannelScore],
    target: f64,
    kind: BudgetKind,
    opts: &SelectOptions<'_>,
) -> Result<Selection> {
    let max_target = match kind {
        BudgetKind::ChannelFraction => 1.0,
        BudgetKind::ParameterFraction => 1.0 - f64::EPSILON,
    };
    if !(0.0..=max_target).contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "pruning target must be in [0, 1), got {target}"
        )));
    }
    let order = removal_order(partition, scores, opts)?;
    let total = partition.prunable_channel_count();

    match kind {
        BudgetKind::ChannelFraction => {
            let k = ((target * total as f64).round() as usize).min(order.len());
            let mask = mask_from_prefix(partition, &order[..k]);
            let achieved = if total == 0 { 0.0 } else { k as f64 / total as f64 };
            Ok(Selection {
                mask,
                budget_kind: kind,
                target,
                achieved_fraction: achieved,
                achievable: k as f64 == (target * total as f64).round(),
            })
        }
        BudgetKind::ParameterFraction => {
            let frac = |k: usize| removed_param_fraction(model, partition, &mask_from_prefix(partition, &order[..k]));
            // Smallest k whose removed fraction reaches the target; the
            // fraction is nondecreasing in k.
            let (mut lo, mut hi) = (0usize, order.len());
            if frac(hi)? < target {
                lo = hi;
            } else {
                while lo < hi {
                    let mid = lo + (hi - lo) / 2;
                    if frac(mid)? >= target {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
            }
            let mut best = (lo, frac(lo)?);
            if lo > 0 {
                let below = frac(lo - 1)?;
                if (below - target).abs() < (best.1 - target).abs() {
                    best = (lo - 1, below);
                }
            }
            Ok(Selection {
                mask: mask_from_prefix(partition, &order[..best.0]),
                budget_kind: kind,
                target,
                achieved_fraction: best.1,
                achievable: (best.1 - target).abs() <= PARAM_BUDGET_TOLERANCE,
            })
        }
    }
}

/// Smooth-L1 penalty `λ Σ f(x)` with `f(x) = x²/(2β)` for `|x| < β`, else
/// `|x| − β/2`. Returns the loss and the per-element gradient.
pub fn slimming_penalty(gammas: &[f64], lambda: f64, beta: f64) -> (f64, Vec<f64>) {
    assert!(beta > 0.0, "smooth-L1 transition must be positive");
    let mut loss = 0.0;
    let grad = gammas
        .iter()
        .map(|&x| {
            loss += if x.abs() < beta { x * x / (2.0 * beta) } else { x.abs() - beta / 2.0 };
            lambda * (x / beta).clamp(-1.0, 1.0)
        })
        .collect();
    (lambda * loss, grad)
}

/// SWD strength at step `t` of `total`: geometric interpolation from
/// `a_min` to `a_max`. The endpoints are returned exactly.
pub fn swd_coefficient(t: u64, total: u64, a_min: f64, a_max: f64) -> f64 {
    assert!(total > 0, "total steps must be positive");
    let t = t.min(total);
    if t == 0 || a_min == a_max {
        return a_min;
    }
    if t == total {
        return a_max;
    }
    a_min * (a_max / a_min).powf(t as f64 / total as f64)
}

/// Parameter entries decayed by SWD for one targeted channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SwdTarget {
    pub conv_weight: String,
    pub conv_bias: Option<String>,
    pub bn_scale: String,
    pub bn_bias: String,
    pub channel: usize,
}

/// The structured units (filter, bias entry, γ, β) of every channel that
/// `mask` removes.
pub fn swd_targets(model: &GraphModel, partition: &DependencyPartition, mask: &PruneMask) -> Result<Vec<SwdTarget>> {
    partition.check_mask(mask)?;
    let mut out = Vec::new();
    for (gid, removed) in mask.removed(partition) {
        if removed.is_empty() {
            continue;
        }
        let g = &partition.groups[&gid];
        let conv = model
            .node(g.conv.as_deref().expect("prunable groups have a conv"))
            .ok_or_else(|| Error::InvalidGraph(format!("missing conv for `{gid}`")))?;
        let bn = model
            .node(g.bn.as_deref().expect("prunable groups have a BN"))
            .ok_or_else(|| Error::InvalidGraph(format!("missing BN for `{gid}`")))?;
        for c in removed {
            out.push(SwdTarget {
                conv_weight: conv.inputs[1].clone(),
                conv_bias: conv.inputs.get(2).cloned(),
                bn_scale: bn.inputs[1].clone(),
                bn_bias: bn.inputs[2].clone(),
                channel: c,
            });
        }
    }
    Ok(out)
}

/// Multiply every targeted entry by `max(0, 1 − lr·a·wd)`.
pub fn swd_apply<T: Float + Default>(
    params: &mut BTreeMap<String, Tensor<T>>,
    targets: &[SwdTarget],
    a: f64,
    wd: f64,
    lr: f64,
) -> Result<()> {
    let factor = T::from((1.0 - lr * a * wd).max(0.0)).expect("finite factor");
    for t in targets {
        let names = [Some(&t.conv_weight), t.conv_bias.as_ref(), Some(&t.bn_scale), Some(&t.bn_bias)];
        for name in names.into_iter().flatten() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            let inner = p.inner_len();
            if p.shape().first().is_none_or(|&c| t.channel >= c) {
                return Err(Error::InvalidArgument(format!(
                    "channel {} out of range for `{name}`",
                    t.channel
                )));
            }
            for v in &mut p.data_mut()[t.channel * inner..(t.channel + 1) * inner] {
                *v = *v * factor;
            }
        }
    }
    Ok(())
}

/// Slimming hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlimmingConfig {
    /// Penalty coefficient λ (chosen; not published).
    pub lambda: f64,
    /// Smooth-L1 transition β.
    pub beta: f64,
    pub n_steps: usize,
    pub finetune_epochs: usize,
    pub final_rate: f64,
    pub budget: BudgetKind,
}

impl Default for SlimmingConfig {
    /// Published schedule: 3 steps, 20 fine-tune epochs.
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            beta: 1.0,
            n_steps: 3,
            finetune_epochs: 20,
            final_rate: 0.5,
            budget: BudgetKind::ParameterFraction,
        }
    }
}

impl SlimmingConfig {
    pub fn toy(final_rate: f64) -> Self {
        Self {
            finetune_epochs: 5,
            final_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.final_rate) {
            return Err(Error::InvalidArgument(format!("final_rate must be in [0, 1), got {}", self.final_rate)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        if self.beta.is_nan() || self.beta <= 0.0 || self.lambda.is_nan() || self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be >= 0 and beta > 0".into()));
        }
        Ok(())
    }

    /// Linear ramp `k·p/n` for `k = 1..=n`.
    pub fn step_rates(&self) -> Vec<f64> {
        (1..=self.n_steps)
            .map(|k| {
                if k == self.n_steps {
                    self.final_rate
                } else {
                    self.final_rate * k as f64 / self.n_steps as f64
                }
            })
            .collect()
    }
}

/// How often the SWD targeted set is recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecomputePeriod {
    Epoch,
    Steps(usize),
}

/// Selective weight decay hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwdConfig {
    pub a_min: f64,
    pub a_max: f64,
    pub final_rate: f64,
    pub budget: BudgetKind,
    pub recompute: RecomputePeriod,
}

impl Default for SwdConfig {
    fn default() -> Self {
        Self {
            a_min: 1e-1,
            a_max: 1e10,
            final_rate: 0.5,
            budget: BudgetKind::ParameterFraction,
            recompute: RecomputePeriod::Epoch,
        }
    }
}

impl SwdConfig {
    pub fn toy(final_rate: f64) -> Self {
        Self {
            final_rate,
            ..Self::default()
        }
    }

    /// `a_min = a_max = 0` is accepted and disables the penalty.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.final_rate) {
            return Err(Error::InvalidArgument(format!("final_rate must be in [0, 1), got {}", self.final_rate)));
        }
        let disabled = self.a_min == 0.0 && self.a_max == 0.0;
        if !disabled && !(self.a_min > 0.0 && self.a_min <= self.a_max && self.a_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < a_min <= a_max, got a_min={} a_max={}",
                self.a_min, self.a_max
            )));
        }
        if let RecomputePeriod::Steps(0) = self.recompute {
            return Err(Error::InvalidArgument("recompute period must be positive".into()));
        }
        Ok(())
    }
}
