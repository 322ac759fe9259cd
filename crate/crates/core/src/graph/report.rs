use super::ModelGraph;
use crate::error::Result;
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct RangeEntry {
    pub layer: String,
    pub weight_min: f64,
    pub weight_max: f64,
    pub dynamic_range: f64,
}

/// Weight dynamic range (max - min) of every weighted layer, in layer order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RangeReport {
    pub entries: Vec<RangeEntry>,
}

impl RangeReport {
    pub fn get(&self, layer: &str) -> Option<&RangeEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,min,max,range\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.layer, e.weight_min, e.weight_max, e.dynamic_range
            );
        }
        out
    }
}

pub fn dynamic_range_report(graph: &ModelGraph) -> RangeReport {
    let entries = graph
        .layers
        .iter()
        .filter_map(|l| l.kind.weights().map(|w| (l, w)))
        .map(|(l, w)| {
            let (lo, hi) = (w.min(), w.max());
            RangeEntry {
                layer: l.name.clone(),
                weight_min: lo,
                weight_max: hi,
                dynamic_range: hi - lo,
            }
        })
        .collect();
    RangeReport { entries }
}

/// `layer,macs` rows for weighted layers plus a closing `total` row.
pub fn mac_report_csv(graph: &ModelGraph) -> Result<String> {
    let mut out = String::from("layer,macs\n");
    let per_layer = graph.layer_macs()?;
    for (layer, macs) in per_layer.iter().filter(|(_, m)| *m > 0) {
        let _ = writeln!(out, "{layer},{macs}");
    }
    let total: u64 = per_layer.iter().map(|(_, m)| m).sum();
    let _ = writeln!(out, "total,{total}");
    Ok(out)
}
