//! Multiply-add and parameter accounting over a resolved layer plan.
//!
//! One multiply-add counts as one op. Convolutions and fully-connected
//! layers carry no bias (the following batchnorm supplies the shift);
//! batchnorm carries `2·channels` parameters and no ops; pooling, SPP,
//! relu and dropout are free.

use serde::Serialize;

use crate::archdsl::{expand_layers, ArchSpec, ExpandError, Geometry, LayerKind, LayerPlan};
use crate::network::HeadConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub kind: &'static str,
    pub ops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub per_layer: Vec<LayerCost>,
    pub total_ops: u64,
    pub total_params: u64,
}

impl ComplexityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,ops,params\n");
        for l in &self.per_layer {
            out.push_str(&format!("{},{},{},{}\n", l.index, l.kind, l.ops, l.params));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>5} {:<9} {:>14} {:>12}\n", "layer", "kind", "ops", "params");
        for l in &self.per_layer {
            out.push_str(&format!("{:>5} {:<9} {:>14} {:>12}\n", l.index, l.kind, l.ops, l.params));
        }
        out.push_str(&format!("{:>5} {:<9} {:>14} {:>12}\n", "", "total", self.total_ops, self.total_params));
        out
    }
}

pub fn count_complexity(plan: &LayerPlan) -> ComplexityReport {
    let per_layer: Vec<LayerCost> = plan
        .layers
        .iter()
        .enumerate()
        .map(|(index, l)| {
            let (ops, params) = match l.kind {
                LayerKind::Conv => {
                    let weights = (l.filter_h * l.filter_w * l.in_channels * l.out_channels) as u64;
                    ((l.out_h * l.out_w) as u64 * weights, weights)
                }
                LayerKind::Fc => {
                    let weights = (l.in_channels * l.out_channels) as u64;
                    (weights, weights)
                }
                LayerKind::BatchNorm => (0, 2 * l.out_channels as u64),
                LayerKind::Pool | LayerKind::Spp { .. } | LayerKind::Relu | LayerKind::Dropout { .. } => (0, 0),
            };
            LayerCost { index, kind: l.kind.name(), ops, params }
        })
        .collect();
    let total_ops = per_layer.iter().map(|l| l.ops).sum();
    let total_params = per_layer.iter().map(|l| l.params).sum();
    ComplexityReport { per_layer, total_ops, total_params }
}

/// Ops of a factored `1×3 + 3×1` block over a single `3×3` convolution,
/// both size-preserving on `spatial`, the factored block's intermediate
/// width being `out_ch`.
pub fn factorization_ratio(in_ch: usize, out_ch: usize, spatial: Geometry) -> f64 {
    let positions = (spatial.height * spatial.width) as u64;
    let (i, o) = (in_ch as u64, out_ch as u64);
    let square = positions * o * 9 * i;
    let factored = positions * o * 3 * i + positions * o * 3 * o;
    factored as f64 / square as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct RankedArch {
    pub name: String,
    pub total_ops: u64,
    pub total_params: u64,
}

/// Expands and counts every spec, sorted by total ops, largest first
/// (stable for equal totals).
pub fn compare_architectures(
    specs: &[ArchSpec],
    input: Geometry,
    head: &HeadConfig,
) -> Result<Vec<RankedArch>, (String, ExpandError)> {
    let mut rows = specs
        .iter()
        .map(|spec| {
            let plan = expand_layers(spec, input, head).map_err(|e| (spec.name.clone(), e))?;
            let report = count_complexity(&plan);
            Ok(RankedArch { name: spec.name.clone(), total_ops: report.total_ops, total_params: report.total_params })
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| b.total_ops.cmp(&a.total_ops));
    Ok(rows)
}

pub fn render_table(rows: &[RankedArch]) -> String {
    let mut out = format!("{:<16} {:>12} {:>12}\n", "name", "ops (M)", "params (M)");
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>12.1} {:>12.2}\n",
            r.name,
            r.total_ops as f64 / 1e6,
            r.total_params as f64 / 1e6
        ));
    }
    out
}
