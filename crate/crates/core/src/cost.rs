//! Analytic MAC, FLOP and parameter accounting.
//!
//! Core counts are multiply-accumulates. FLOPs are derived per operation:
//! a convolution MAC is two FLOPs, a Hadamard product is one multiply per
//! element, and element-wise curves cost a fixed number of ops per element.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, BottleneckSpec, Expansion, LayerSpec};
use crate::error::{invalid_arg, Error, Result};
use crate::pairing::pair_count;

/// Ops per element of the dynamic normalisation curve.
pub const DYNORM_OPS: u64 = 4;
/// ECA kernel width assumed by reports.
pub const ECA_KERNEL: u64 = 3;
/// Ghost cheap-operation kernel assumed by reports.
pub const GHOST_KERNEL: u64 = 3;
pub const DEFAULT_INPUT: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    /// Input channels.
    pub m: u64,
    /// Output channels.
    pub n: u64,
    /// Spatial side.
    pub f: u64,
    /// Cheap-op kernel.
    pub k: u64,
    /// Ghost primary channels.
    pub s: u64,
}

impl ExpansionSpec {
    /// Ghost primaries default to half the output width.
    pub fn new(m: u64, n: u64, f: u64) -> Self {
        Self { m, n, f, k: GHOST_KERNEL, s: (n / 2).max(1) }
    }
}

/// `m n f^2` MACs.
pub fn flops_pointwise(spec: &ExpansionSpec) -> u64 {
    spec.m * spec.n * spec.f * spec.f
}

/// `m s f^2 + (n - s) k^2 f^2` MACs.
pub fn flops_ghost(spec: &ExpansionSpec) -> Result<u64> {
    if spec.s == 0 || spec.s > spec.n {
        return Err(invalid_arg!("ghost primaries {} must lie in [1, {}]", spec.s, spec.n));
    }
    let f2 = spec.f * spec.f;
    Ok(spec.m * spec.s * f2 + (spec.n - spec.s) * spec.k * spec.k * f2)
}

/// `m^2 f^2 + (n - m) f^2` MACs.
pub fn flops_ach(spec: &ExpansionSpec) -> Result<u64> {
    let (m, n) = (spec.m, spec.n);
    if n < m {
        return Err(invalid_arg!("expansion needs n >= m, got m={m} n={n}"));
    }
    if n - m > m * m.saturating_sub(1) / 2 {
        return Err(invalid_arg!("{} derived channels exceed the {} available pairs", n - m, m * (m - 1) / 2));
    }
    let f2 = spec.f * spec.f;
    Ok(m * m * f2 + (n - m) * f2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub macs: u64,
    pub flops: u64,
}

impl Cost {
    /// Convolution or dense MACs, two FLOPs each.
    pub fn conv(macs: u64) -> Self {
        Self { macs, flops: 2 * macs }
    }

    /// Element-wise products, one FLOP each.
    pub fn product(elems: u64) -> Self {
        Self { macs: elems, flops: elems }
    }

    /// Non-MAC element-wise work.
    pub fn ops(flops: u64) -> Self {
        Self { macs: 0, flops }
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { macs: self.macs + o.macs, flops: self.flops + o.flops }
    }
}

pub fn pointwise_cost(spec: &ExpansionSpec) -> Cost {
    Cost::conv(flops_pointwise(spec))
}

pub fn ghost_cost(spec: &ExpansionSpec) -> Result<Cost> {
    Ok(Cost::conv(flops_ghost(spec)?))
}

pub fn ach_cost(spec: &ExpansionSpec) -> Result<Cost> {
    flops_ach(spec)?;
    let f2 = spec.f * spec.f;
    Ok(Cost::conv(spec.m * spec.m * f2) + Cost::product((spec.n - spec.m) * f2))
}

/// ACH over pointwise MACs: `(m^2 + n - m) / (m n)`.
pub fn ratio_ach(m: u64, n: u64) -> f64 {
    (m * m + n - m) as f64 / (m * n) as f64
}

/// Ghost over pointwise MACs: `(m s + (n - s) k^2) / (m n)`.
pub fn ratio_ghost(m: u64, n: u64, s: u64, k: u64) -> f64 {
    (m * s + (n - s) * k * k) as f64 / (m * n) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMode {
    /// Fixed expansion ratio, varying input width.
    Channels,
    /// Fixed input width, varying expansion ratio.
    Ratio,
}

impl FromStr for CurveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channels" => Ok(CurveMode::Channels),
            "ratio" => Ok(CurveMode::Ratio),
            _ => Err(invalid_arg!("unknown curve mode `{s}` (channels|ratio)")),
        }
    }
}

impl fmt::Display for CurveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurveMode::Channels => "channels",
            CurveMode::Ratio => "ratio",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub m: u64,
    pub n: u64,
    pub f: u64,
    pub pointwise: Cost,
    pub ghost: Cost,
    pub ach: Cost,
}

impl CurvePoint {
    pub fn at(m: u64, n: u64, f: u64) -> Result<Self> {
        let spec = ExpansionSpec::new(m, n, f);
        Ok(Self { m, n, f, pointwise: pointwise_cost(&spec), ghost: ghost_cost(&spec)?, ach: ach_cost(&spec)? })
    }

    pub fn expansion_ratio(&self) -> f64 {
        self.n as f64 / self.m as f64
    }

    pub fn ach_ratio_macs(&self) -> f64 {
        self.ach.macs as f64 / self.pointwise.macs as f64
    }

    pub fn ach_ratio_flops(&self) -> f64 {
        self.ach.flops as f64 / self.pointwise.flops as f64
    }

    pub fn ghost_ratio_macs(&self) -> f64 {
        self.ghost.macs as f64 / self.pointwise.macs as f64
    }
}

/// Default sweeps: channel mode takes `m = 16, 32, ..., 512` at `r = 4`;
/// ratio mode takes `r = 4..=24` at `m = 64`.
pub fn ratio_curves(mode: CurveMode, f: u64) -> Result<Vec<CurvePoint>> {
    match mode {
        CurveMode::Channels => (1..=32).map(|i| CurvePoint::at(16 * i, 64 * i, f)).collect(),
        CurveMode::Ratio => (4..=24).map(|r| CurvePoint::at(64, 64 * r, f)).collect(),
    }
}

/// One row per point, tagged with the sweep it belongs to.
pub fn write_curves_csv<W: Write>(mut out: W, sweeps: &[(CurveMode, Vec<CurvePoint>)], comment: &str) -> Result<()> {
    writeln!(out, "# {comment}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "mode",
        "m",
        "n",
        "r",
        "f",
        "pointwise_macs",
        "ghost_macs",
        "ach_macs",
        "pointwise_flops",
        "ghost_flops",
        "ach_flops",
        "ach_ratio_macs",
        "ach_ratio_flops",
        "ghost_ratio_macs",
    ])?;
    for (mode, p) in sweeps.iter().flat_map(|(mode, pts)| pts.iter().map(move |p| (mode, p))) {
        w.write_record([
            mode.to_string(),
            p.m.to_string(),
            p.n.to_string(),
            format!("{}", p.expansion_ratio()),
            p.f.to_string(),
            p.pointwise.macs.to_string(),
            p.ghost.macs.to_string(),
            p.ach.macs.to_string(),
            p.pointwise.flops.to_string(),
            p.ghost.flops.to_string(),
            p.ach.flops.to_string(),
            format!("{:.9}", p.ach_ratio_macs()),
            format!("{:.9}", p.ach_ratio_flops()),
            format!("{:.9}", p.ghost_ratio_macs()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One accounting line; a layer may contribute several.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    /// `[C, H, W]` after this line.
    pub out_shape: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input: usize,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_flops: u64,
}

impl CostReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, mut out: W, comment: &str) -> Result<()> {
        writeln!(out, "# {comment}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "name", "params", "macs", "flops", "out_c", "out_h", "out_w"])?;
        for l in &self.layers {
            w.write_record([
                l.layer.to_string(),
                l.name.clone(),
                l.params.to_string(),
                l.macs.to_string(),
                l.flops.to_string(),
                l.out_shape[0].to_string(),
                l.out_shape[1].to_string(),
                l.out_shape[2].to_string(),
            ])?;
        }
        w.write_record([
            "total".into(),
            String::new(),
            self.total_params.to_string(),
            self.total_macs.to_string(),
            self.total_flops.to_string(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// Sums per layer index.
    pub fn per_layer(&self) -> Vec<(usize, u64, u64)> {
        let mut out: Vec<(usize, u64, u64)> = Vec::new();
        for l in &self.layers {
            match out.last_mut() {
                Some(last) if last.0 == l.layer => {
                    last.1 += l.params;
                    last.2 += l.macs;
                }
                _ => out.push((l.layer, l.params, l.macs)),
            }
        }
        out
    }
}

struct Walker {
    layer: usize,
    c: usize,
    h: usize,
    lines: Vec<LayerCost>,
}

impl Walker {
    fn push(&mut self, name: String, params: u64, cost: Cost) {
        self.lines.push(LayerCost {
            layer: self.layer,
            name,
            params,
            macs: cost.macs,
            flops: cost.flops,
            out_shape: [self.c, self.h, self.h],
        });
    }

    fn expect_channels(&self, c_in: usize) -> Result<()> {
        if c_in != self.c {
            return Err(Error::Config(format!(
                "layer {} expects {c_in} input channels but receives {}",
                self.layer, self.c
            )));
        }
        Ok(())
    }

    /// Full convolution followed by optional batch norm.
    fn conv(&mut self, name: &str, c_out: usize, k: usize, stride: usize, bn: bool) {
        let h = self.h.div_ceil(stride);
        let macs = (self.c * c_out * k * k * h * h) as u64;
        let params = (self.c * c_out * k * k + if bn { 2 * c_out } else { 0 }) as u64;
        self.c = c_out;
        self.h = h;
        self.push(name.into(), params, Cost::conv(macs));
    }

    fn depthwise(&mut self, name: &str, k: usize, stride: usize) {
        let h = self.h.div_ceil(stride);
        let macs = (self.c * k * k * h * h) as u64;
        self.h = h;
        self.push(name.into(), (self.c * k * k + 2 * self.c) as u64, Cost::conv(macs));
    }

    fn bottleneck(&mut self, b: &BottleneckSpec) -> Result<()> {
        let m = b.c_in;
        let f2 = (self.h * self.h) as u64;
        match b.expansion {
            Expansion::Ghost { ratio } => {
                let n = (m as f64 * ratio).round() as usize;
                let s = (n / 2).max(1);
                self.conv("ghost.primary", s, 1, 1, true);
                let ghosts = (n - s) as u64;
                let k = GHOST_KERNEL;
                let cheap = Cost::conv(ghosts * k * k * f2);
                self.c = n;
                self.push("ghost.cheap".into(), ghosts * k * k + 2 * ghosts, cheap);
            }
            Expansion::Hada { c_sel } => {
                if c_sel < 2 || c_sel > m {
                    return Err(Error::Config(format!("layer {}: selected channels {c_sel} outside [2, {m}]", self.layer)));
                }
                self.conv("ach.pointwise", m, 1, 1, true);
                self.push("ach.eca".into(), ECA_KERNEL + 1, Cost::ops(m as u64 * f2) + Cost::conv(m as u64 * ECA_KERNEL));
                let p = pair_count(c_sel) as u64;
                self.c = m + p as usize;
                self.push("ach.hadamard".into(), 0, Cost::product(p * f2));
                self.push("ach.dynorm".into(), 3 * p, Cost::ops(DYNORM_OPS * p * f2));
            }
        }
        self.depthwise("depthwise", b.kernel, b.stride);
        self.conv("project", b.c_out, 1, 1, true);
        Ok(())
    }
}

/// Per-line costs of `spec` at a square input of side `input`.
pub fn model_report(spec: &ArchSpec, input: usize) -> Result<CostReport> {
    let first = spec.layers.first().ok_or_else(|| Error::Config("empty architecture".into()))?;
    let c0 = match first {
        LayerSpec::Cna { c_in, .. } | LayerSpec::Fn { c_in, .. } => *c_in,
        LayerSpec::Ab(b) => b.c_in,
    };
    let mut w = Walker { layer: 0, c: c0, h: input, lines: Vec::new() };
    for (i, layer) in spec.layers.iter().enumerate() {
        w.layer = i;
        match layer {
            LayerSpec::Cna { c_in, c_out, kernel, stride, norm, .. } => {
                w.expect_channels(*c_in)?;
                w.conv("conv", *c_out, *kernel, *stride, norm != "None");
            }
            LayerSpec::Ab(b) => {
                w.expect_channels(b.c_in)?;
                w.bottleneck(b)?;
            }
            LayerSpec::Fn { c_in, classes, hidden, .. } => {
                w.expect_channels(*c_in)?;
                let pool = Cost::ops((w.c * w.h * w.h) as u64);
                w.h = 1;
                w.push("pool".into(), 0, pool);
                let (ci, hd, cl) = (*c_in as u64, *hidden as u64, *classes as u64);
                w.c = *hidden;
                w.push("fc.hidden".into(), ci * hd + hd, Cost::conv(ci * hd));
                w.c = *classes;
                w.push("fc.classes".into(), hd * cl + cl, Cost::conv(hd * cl));
            }
        }
    }
    let lines = w.lines;
    Ok(CostReport {
        input,
        total_params: lines.iter().map(|l| l.params).sum(),
        total_macs: lines.iter().map(|l| l.macs).sum(),
        total_flops: lines.iter().map(|l| l.flops).sum(),
        layers: lines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::REFERENCE_SMALL;

    #[test]
    fn worked_examples() {
        assert_eq!(flops_pointwise(&ExpansionSpec { m: 64, n: 256, f: 14, k: 3, s: 128 }), 3_211_264);
        assert_eq!(flops_ghost(&ExpansionSpec { m: 64, n: 256, f: 14, k: 3, s: 128 }).unwrap(), 1_831_424);
        let spec = ExpansionSpec { m: 64, n: 256, f: 1, k: 3, s: 128 };
        assert_eq!(flops_ach(&spec).unwrap(), 4288);
        assert!((ratio_ach(64, 256) - 4288.0 / 16384.0).abs() < 1e-15);
        assert_eq!(flops_pointwise(&ExpansionSpec { f: 1, ..spec }), 64 * 256);
        assert_eq!(flops_pointwise(&ExpansionSpec { n: 1, f: 5, ..spec }), 64 * 25);
    }

    #[test]
    fn degenerate_identities() {
        let spec = ExpansionSpec { m: 24, n: 40, f: 7, k: 5, s: 40 };
        assert_eq!(flops_ghost(&spec).unwrap(), flops_pointwise(&spec));
        let spec = ExpansionSpec { n: 24, ..spec };
        assert_eq!(flops_ach(&spec).unwrap(), 24 * 24 * 49);
        assert!(flops_ghost(&ExpansionSpec { s: 41, ..spec }).is_err());
        assert!(flops_ach(&ExpansionSpec { m: 4, n: 11, ..spec }).is_err());
        assert!(flops_ach(&ExpansionSpec { m: 4, n: 10, ..spec }).is_ok());
        assert!(flops_ach(&ExpansionSpec { m: 4, n: 3, ..spec }).is_err());
    }

    #[test]
    fn per_derived_channel_costs_one_plane() {
        let a = flops_ach(&ExpansionSpec { m: 32, n: 40, f: 9, k: 3, s: 1 }).unwrap();
        let b = flops_ach(&ExpansionSpec { m: 32, n: 41, f: 9, k: 3, s: 1 }).unwrap();
        assert_eq!(b - a, 81);
    }

    #[test]
    fn single_stem_layer() {
        let spec: ArchSpec = "CNA 3 32 2 2 BN None".parse().unwrap();
        let r = model_report(&spec, 224).unwrap();
        assert_eq!(r.total_params, 448);
        assert_eq!(r.total_macs, 3 * 32 * 4 * 112 * 112);
        assert_eq!(r.total_flops, 2 * r.total_macs);
        assert_eq!(r.layers[0].out_shape, [32, 112, 112]);
    }

    #[test]
    fn reference_network_shapes() {
        let spec: ArchSpec = REFERENCE_SMALL.parse().unwrap();
        let r = model_report(&spec, 224).unwrap();
        assert_eq!(r.layers.last().unwrap().out_shape, [100, 1, 1]);
        assert_eq!(r.per_layer().len(), 16);
        let hada = r.layers.iter().find(|l| l.layer == 6 && l.name == "ach.dynorm").unwrap();
        assert_eq!(hada.out_shape, [216, 14, 14]);
        let json: CostReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json, r);
        let mut csv = Vec::new();
        r.write_csv(&mut csv, "x").unwrap();
        assert!(String::from_utf8(csv).unwrap().lines().last().unwrap().starts_with("total,"));
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let spec: ArchSpec = "CNA 3 32 2 2 BN None\nCNA 16 32 1 1 BN HS".parse().unwrap();
        assert!(matches!(model_report(&spec, 224), Err(Error::Config(_))));
    }
}
