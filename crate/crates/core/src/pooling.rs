//! Turning a multi-scale descriptor bag into one image representation.
//!
//! * `Mpp`: per-scale FV, per-scale l2, equal-weight average over scales,
//!   then power and l2 normalization.
//! * `Nfk`: one FV over every descriptor regardless of scale.
//! * `Csf`: per-scale improved FVs concatenated, then l2.
//! * `Ap`: mean of raw activation vectors, then l2.
//! * `MppSp`: `Mpp` over whole / top / middle / bottom thirds, concatenated.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{config, input, Error, Result};
use crate::fisher::{self, encode_fv, l2_normalize_slice, power_normalize_slice, FisherVector};
use crate::gmm::GmmModel;
use crate::pyramid::DescriptorSet;

pub const POWER_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Strategy {
    #[serde(rename = "mpp")]
    Mpp,
    #[serde(rename = "nfk")]
    Nfk,
    #[serde(rename = "csf")]
    Csf,
    #[serde(rename = "ap")]
    Ap,
    #[serde(rename = "mpp-sp")]
    MppSp,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Mpp,
        Strategy::Nfk,
        Strategy::Csf,
        Strategy::Ap,
        Strategy::MppSp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mpp => "mpp",
            Strategy::Nfk => "nfk",
            Strategy::Csf => "csf",
            Strategy::Ap => "ap",
            Strategy::MppSp => "mpp-sp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown pooling strategy `{s}` (mpp, nfk, csf, ap, mpp-sp)"
                ))
            })
    }

    /// Nibble stored in the high half of the `MPPF` flags byte.
    pub fn tag(self) -> u8 {
        match self {
            Strategy::Mpp => 1,
            Strategy::Nfk => 2,
            Strategy::Csf => 3,
            Strategy::Ap => 4,
            Strategy::MppSp => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Strategy::ALL.into_iter().find(|s| s.tag() == tag)
    }

    /// Payload length for a `K`-component vocabulary over `d` dims and `n`
    /// scales (`d` is the raw activation dim for `Ap`).
    pub fn payload_len(self, k: usize, d: usize, n: usize) -> usize {
        match self {
            Strategy::Mpp | Strategy::Nfk => 2 * k * d,
            Strategy::Csf => n * 2 * k * d,
            Strategy::MppSp => 4 * 2 * k * d,
            Strategy::Ap => d,
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledRepresentation {
    pub strategy: Strategy,
    pub k: usize,
    pub d: usize,
    pub payload: Vec<f64>,
    /// Scales that went into the vector (1-based) and their descriptor counts.
    pub scales: Vec<usize>,
    pub scale_counts: Vec<usize>,
    pub power_normalized: bool,
    /// Whole payload had zero norm before the final l2 step.
    pub zero: bool,
    /// `MppSp` only: regions that received no descriptors.
    pub zero_blocks: Vec<bool>,
}

impl PooledRepresentation {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn norm(&self) -> f64 {
        fisher::norm(&self.payload)
    }
}

/// Resolves an optional 1-based scale mask against the set; every selected
/// scale must hold at least one descriptor.
pub fn resolve_scales(set: &DescriptorSet, mask: Option<&[usize]>) -> Result<Vec<usize>> {
    let scales: Vec<usize> = match mask {
        Some(m) => m.to_vec(),
        None => (1..=set.n_scales()).collect(),
    };
    if scales.is_empty() {
        return config("empty scale selection");
    }
    for (i, &s) in scales.iter().enumerate() {
        if s == 0 || s > set.n_scales() {
            return config(format!("scale {s} outside 1..={}", set.n_scales()));
        }
        if scales[..i].contains(&s) {
            return config(format!("scale {s} selected twice"));
        }
        if set.scale_counts()[s - 1] == 0 {
            return input(format!("scale {s} has no descriptors"));
        }
    }
    Ok(scales)
}

fn check_dims(model: &GmmModel, set: &DescriptorSet) -> Result<()> {
    if model.d() != set.dim() {
        return input(format!(
            "descriptor dim {} != gmm dim {}",
            set.dim(),
            model.d()
        ));
    }
    Ok(())
}

/// Unnormalized per-scale Fisher vectors, in mask order.
pub fn per_scale_fvs(
    model: &GmmModel,
    set: &DescriptorSet,
    scales: &[usize],
) -> Result<Vec<FisherVector>> {
    check_dims(model, set)?;
    scales
        .par_iter()
        .map(|&s| encode_fv(model, set.scale_data(s)))
        .collect()
}

fn finish(
    strategy: Strategy,
    model: &GmmModel,
    set: &DescriptorSet,
    scales: Vec<usize>,
    mut payload: Vec<f64>,
    power: bool,
) -> PooledRepresentation {
    if power {
        power_normalize_slice(&mut payload, POWER_ALPHA);
    }
    let zero = !l2_normalize_slice(&mut payload);
    let scale_counts = scales.iter().map(|&s| set.scale_counts()[s - 1]).collect();
    PooledRepresentation {
        strategy,
        k: model.k(),
        d: model.d(),
        payload,
        scales,
        scale_counts,
        power_normalized: power,
        zero,
        zero_blocks: Vec::new(),
    }
}

/// Each selected scale's additive share of the pre-power aggregate.
///
/// For `Mpp` this is `v_s / N` with `v_s` the l2-normalized scale FV, for
/// `Nfk` it is `(|x_s| / |X|) * G_s`.
pub fn scale_contributions(
    strategy: Strategy,
    model: &GmmModel,
    set: &DescriptorSet,
    mask: Option<&[usize]>,
) -> Result<Vec<Vec<f64>>> {
    let scales = resolve_scales(set, mask)?;
    let fvs = per_scale_fvs(model, set, &scales)?;
    match strategy {
        Strategy::Mpp => {
            let n = scales.len() as f64;
            Ok(fvs
                .into_iter()
                .map(|fv| {
                    let mut v = fv.into_vec();
                    l2_normalize_slice(&mut v);
                    v.iter_mut().for_each(|x| *x /= n);
                    v
                })
                .collect())
        }
        Strategy::Nfk => {
            let total: usize = scales.iter().map(|&s| set.scale_counts()[s - 1]).sum();
            Ok(fvs
                .into_iter()
                .zip(&scales)
                .map(|(fv, &s)| {
                    let w = set.scale_counts()[s - 1] as f64 / total as f64;
                    fv.into_vec().into_iter().map(|x| x * w).collect()
                })
                .collect())
        }
        other => config(format!("no scale decomposition for `{other}`")),
    }
}

/// Average of l2-normalized per-scale FVs, before the final normalizations.
pub fn mpp_aggregate(model: &GmmModel, set: &DescriptorSet, scales: &[usize]) -> Result<Vec<f64>> {
    let fvs = per_scale_fvs(model, set, scales)?;
    let mut acc = vec![0.0; 2 * model.k() * model.d()];
    for fv in fvs {
        let mut v = fv.into_vec();
        l2_normalize_slice(&mut v);
        acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
    }
    let n = scales.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

pub fn pool_mpp(
    model: &GmmModel,
    set: &DescriptorSet,
    mask: Option<&[usize]>,
) -> Result<PooledRepresentation> {
    let scales = resolve_scales(set, mask)?;
    let agg = mpp_aggregate(model, set, &scales)?;
    Ok(finish(Strategy::Mpp, model, set, scales, agg, true))
}

pub fn pool_nfk(
    model: &GmmModel,
    set: &DescriptorSet,
    mask: Option<&[usize]>,
) -> Result<PooledRepresentation> {
    check_dims(model, set)?;
    let scales = resolve_scales(set, mask)?;
    let mut sums: Option<fisher::FisherSums> = None;
    for &s in &scales {
        let part = fisher::fisher_sums(model, set.scale_data(s))?;
        sums = Some(match sums {
            None => part,
            Some(acc) => acc.merge(part),
        });
    }
    let fv = sums.expect("non-empty scale selection").finish(model)?;
    Ok(finish(
        Strategy::Nfk,
        model,
        set,
        scales,
        fv.into_vec(),
        true,
    ))
}

pub fn pool_csf(
    model: &GmmModel,
    set: &DescriptorSet,
    mask: Option<&[usize]>,
) -> Result<PooledRepresentation> {
    let scales = resolve_scales(set, mask)?;
    let fvs = per_scale_fvs(model, set, &scales)?;
    let mut payload = Vec::with_capacity(scales.len() * 2 * model.k() * model.d());
    for fv in fvs {
        let mut v = fv.into_vec();
        power_normalize_slice(&mut v, POWER_ALPHA);
        l2_normalize_slice(&mut v);
        payload.extend(v);
    }
    let mut rep = finish(Strategy::Csf, model, set, scales, payload, false);
    rep.power_normalized = true;
    Ok(rep)
}

/// Mean of raw activation vectors followed by l2.
pub fn pool_ap(vectors: &[Vec<f32>]) -> Result<PooledRepresentation> {
    let Some(first) = vectors.first() else {
        return input("average pooling needs at least one vector");
    };
    let d = first.len();
    if vectors.iter().any(|v| v.len() != d) {
        return input("activation vectors differ in length");
    }
    let mut payload = vec![0.0f64; d];
    for v in vectors {
        payload
            .iter_mut()
            .zip(v)
            .for_each(|(a, &b)| *a += f64::from(b));
    }
    let n = vectors.len() as f64;
    payload.iter_mut().for_each(|a| *a /= n);
    let zero = !l2_normalize_slice(&mut payload);
    Ok(PooledRepresentation {
        strategy: Strategy::Ap,
        k: 0,
        d,
        payload,
        scales: Vec::new(),
        scale_counts: vec![vectors.len()],
        power_normalized: false,
        zero,
        zero_blocks: Vec::new(),
    })
}

/// Spatial-pyramid regions, by normalized center-y.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Whole,
    Top,
    Middle,
    Bottom,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Whole, Region::Top, Region::Middle, Region::Bottom];

    pub fn contains(self, cy: f32) -> bool {
        match self {
            Region::Whole => true,
            Region::Top => cy < 1.0 / 3.0,
            Region::Middle => (1.0 / 3.0..2.0 / 3.0).contains(&cy),
            Region::Bottom => cy >= 2.0 / 3.0,
        }
    }
}

/// `Mpp` per region over the selected scales that reach the region. A region
/// without descriptors contributes a zero block.
pub fn pool_mpp_sp(
    model: &GmmModel,
    set: &DescriptorSet,
    mask: Option<&[usize]>,
) -> Result<PooledRepresentation> {
    check_dims(model, set)?;
    let scales = resolve_scales(set, mask)?;
    let block = 2 * model.k() * model.d();
    let mut payload = Vec::with_capacity(4 * block);
    let mut zero_blocks = Vec::with_capacity(4);
    for region in Region::ALL {
        let sub = set.filter(|g| region.contains(g.cy) && scales.contains(&(g.scale as usize)));
        let present: Vec<usize> = scales
            .iter()
            .copied()
            .filter(|&s| sub.scale_counts()[s - 1] > 0)
            .collect();
        if present.is_empty() {
            payload.extend(std::iter::repeat_n(0.0, block));
            zero_blocks.push(true);
            continue;
        }
        let mut v = mpp_aggregate(model, &sub, &present)?;
        power_normalize_slice(&mut v, POWER_ALPHA);
        l2_normalize_slice(&mut v);
        payload.extend(v);
        zero_blocks.push(false);
    }
    let mut rep = finish(Strategy::MppSp, model, set, scales, payload, false);
    rep.power_normalized = true;
    rep.zero_blocks = zero_blocks;
    Ok(rep)
}

/// Dispatch for the Fisher-based strategies.
pub fn pool(
    strategy: Strategy,
    model: &GmmModel,
    set: &DescriptorSet,
    mask: Option<&[usize]>,
) -> Result<PooledRepresentation> {
    match strategy {
        Strategy::Mpp => pool_mpp(model, set, mask),
        Strategy::Nfk => pool_nfk(model, set, mask),
        Strategy::Csf => pool_csf(model, set, mask),
        Strategy::MppSp => pool_mpp_sp(model, set, mask),
        Strategy::Ap => {
            config("average pooling works on raw activation vectors, not a descriptor set")
        }
    }
}

pub fn write_pooled(rep: &PooledRepresentation, w: impl Write) -> Result<()> {
    let mut f = rep.strategy.tag() << 4 | fisher::flags::L2;
    if rep.power_normalized {
        f |= fisher::flags::POWER;
    }
    if rep.zero {
        f |= fisher::flags::ZERO;
    }
    fisher::write_fv_payload(w, rep.k, rep.d, f, &rep.payload)
}

pub fn read_pooled(r: impl Read) -> Result<PooledRepresentation> {
    let p = fisher::read_fv_payload(r)?;
    let strategy = Strategy::from_tag(p.flags >> 4).ok_or_else(|| Error::Format {
        what: "fisher vector",
        msg: "file holds an unpooled vector".into(),
    })?;
    Ok(PooledRepresentation {
        strategy,
        k: p.k,
        d: p.d,
        payload: p.payload,
        scales: Vec::new(),
        scale_counts: Vec::new(),
        power_normalized: p.flags & fisher::flags::POWER != 0,
        zero: p.flags & fisher::flags::ZERO != 0,
        zero_blocks: Vec::new(),
    })
}

pub fn save_pooled(rep: &PooledRepresentation, path: &Path) -> Result<()> {
    write_pooled(rep, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_pooled(path: &Path) -> Result<PooledRepresentation> {
    read_pooled(std::io::BufReader::new(std::fs::File::open(path)?))
}
