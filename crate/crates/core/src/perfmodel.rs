//! Analytical cycle, throughput and latency model of the streaming pipeline,
//! weight-memory accounting, and a greedy rate-matching folding search.
//!
//! Each weighted layer is one MVTU taking
//! `ceil(Co_pad / PE) * ceil(Wmat / SIMD) * Nvec` cycles per frame, where
//! `Wmat` is the fan-in, `Nvec` the number of output pixels (1 for fc) and
//! `Co_pad` the output channels with the final layer padded to
//! [`FINAL_FC_PAD`]. Pools and the sliding-window units are not modeled.

use serde::{Deserialize, Serialize};

use crate::engine::MvtuConfig;
use crate::error::{Error, Result};
use crate::netspec::{count_binary_ops, infer_shapes, Arch, LayerKind, NetworkSpec, ShapeInfo};

pub const DEFAULT_CLOCK_HZ: f64 = 100e6;

pub const THROUGHPUT_NOTE: &str = "analytic bound from MVTU cycles only; \
    sliding-window, FIFO and host transfer overheads are not modeled, \
    so measured frame rates can be substantially lower";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFolding {
    pub pe: usize,
    pub simd: usize,
}

/// PE / SIMD per weighted layer, in network order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldingConfig {
    pub layers: Vec<LayerFolding>,
}

impl FoldingConfig {
    pub fn from_pairs(pe: &[usize], simd: &[usize]) -> Self {
        assert_eq!(pe.len(), simd.len());
        Self {
            layers: pe
                .iter()
                .zip(simd)
                .map(|(&pe, &simd)| LayerFolding { pe, simd })
                .collect(),
        }
    }

    /// Dimensioning of the built-in networks.
    pub fn builtin(arch: Arch) -> Self {
        match arch {
            Arch::Cnv => Self::from_pairs(
                &[16, 32, 16, 16, 4, 1, 1, 1, 4],
                &[3, 32, 32, 32, 32, 32, 4, 8, 1],
            ),
            Arch::NCnv => Self::from_pairs(
                &[16, 16, 16, 16, 4, 1, 1, 1, 1],
                &[3, 16, 16, 32, 32, 32, 4, 8, 1],
            ),
            Arch::MuCnv => Self::from_pairs(&[4, 4, 4, 4, 1, 1, 1], &[3, 16, 16, 32, 32, 16, 1]),
        }
    }

    pub fn unfolded(spec: &NetworkSpec) -> Self {
        Self {
            layers: vec![LayerFolding { pe: 1, simd: 1 }; spec.weighted_count()],
        }
    }

    pub fn total_pe(&self) -> usize {
        self.layers.iter().map(|l| l.pe).sum()
    }

    pub fn total_simd(&self) -> usize {
        self.layers.iter().map(|l| l.simd).sum()
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.weighted_count() {
            return Err(Error::Folding {
                layer: spec.arch_name.clone(),
                reason: format!(
                    "{} entries for {} weighted layers",
                    self.layers.len(),
                    spec.weighted_count()
                ),
            });
        }
        for ((_, l), f) in spec.weighted_layers().zip(&self.layers) {
            if f.pe == 0 || f.simd == 0 {
                return Err(Error::Folding {
                    layer: l.name.clone(),
                    reason: "PE and SIMD must be at least 1".into(),
                });
            }
        }
        Ok(())
    }

    /// Engine configurations; fails unless every PE divides `Co_pad` and
    /// every SIMD divides the fan-in.
    pub fn to_mvtu(&self, spec: &NetworkSpec) -> Result<Vec<MvtuConfig>> {
        self.validate(spec)?;
        spec.weighted_layers()
            .zip(&self.layers)
            .map(|((i, l), f)| {
                let co = spec.padded_out_channels(i);
                if !co.is_multiple_of(f.pe) || l.fan_in() % f.simd != 0 {
                    return Err(Error::Folding {
                        layer: l.name.clone(),
                        reason: format!("PE {} / SIMD {} do not divide {co} x {}", f.pe, f.simd, l.fan_in()),
                    });
                }
                Ok(MvtuConfig::new(f.pe, f.simd))
            })
            .collect()
    }
}

fn vectors(spec: &NetworkSpec, shapes: &ShapeInfo, index: usize) -> u64 {
    match spec.layers[index].kind {
        LayerKind::Conv => shapes.layers[index].output.pixels() as u64,
        LayerKind::Fc => 1,
        LayerKind::MaxPool => 0,
    }
}

/// Cycles per frame of layer `index`; zero for pools.
pub fn layer_cycles(spec: &NetworkSpec, shapes: &ShapeInfo, index: usize, folding: LayerFolding) -> u64 {
    let l = &spec.layers[index];
    if !l.kind.is_weighted() {
        return 0;
    }
    let co = spec.padded_out_channels(index) as u64;
    let wmat = l.fan_in() as u64;
    co.div_ceil(folding.pe as u64) * wmat.div_ceil(folding.simd as u64) * vectors(spec, shapes, index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMemory {
    pub total_bits: u64,
    /// Entries of `simd_width` bits in each PE's memory.
    pub per_pe_depth: u64,
    pub simd_width: usize,
    /// Number of separate memories; more PEs means more, shallower ones.
    pub fragmentation: usize,
}

pub fn weight_memory(spec: &NetworkSpec, index: usize, folding: LayerFolding) -> WeightMemory {
    let l = &spec.layers[index];
    if !l.kind.is_weighted() {
        return WeightMemory {
            total_bits: 0,
            per_pe_depth: 0,
            simd_width: folding.simd,
            fragmentation: 0,
        };
    }
    let co = spec.padded_out_channels(index) as u64;
    let wmat = l.fan_in() as u64;
    WeightMemory {
        total_bits: wmat * co,
        per_pe_depth: co.div_ceil(folding.pe as u64) * wmat.div_ceil(folding.simd as u64),
        simd_width: folding.simd,
        fragmentation: folding.pe,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub ops: u64,
    pub cycles: u64,
    pub pe: usize,
    pub simd: usize,
    pub weight_bits: u64,
    pub per_pe_depth: u64,
    pub bottleneck: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub arch: String,
    pub clock_hz: f64,
    pub layers: Vec<LayerReport>,
    /// Layer with the most cycles.
    pub bottleneck: String,
    pub max_cycles: u64,
    /// Layer with the most binary operations.
    pub throughput_setter: String,
    pub throughput_fps: f64,
    pub latency_cycles: u64,
    pub latency_s: f64,
    pub note: String,
}

impl PipelineReport {
    pub fn cycles(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.cycles).collect()
    }

    pub fn ops(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.ops).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn pipeline_report(spec: &NetworkSpec, folding: &FoldingConfig, clock_hz: f64) -> Result<PipelineReport> {
    if !clock_hz.is_finite() || clock_hz <= 0.0 {
        return Err(Error::Config(format!("clock must be positive, got {clock_hz}")));
    }
    folding.validate(spec)?;
    let shapes = infer_shapes(spec)?;
    let ops = count_binary_ops(spec, &shapes);
    let mut layers: Vec<LayerReport> = spec
        .weighted_layers()
        .zip(&folding.layers)
        .map(|((i, l), &f)| LayerReport {
            layer: l.name.clone(),
            ops: ops[i],
            cycles: layer_cycles(spec, &shapes, i, f),
            pe: f.pe,
            simd: f.simd,
            weight_bits: weight_memory(spec, i, f).total_bits,
            per_pe_depth: weight_memory(spec, i, f).per_pe_depth,
            bottleneck: false,
        })
        .collect();
    // First maximum wins on ties.
    let first_max = |key: &dyn Fn(&LayerReport) -> u64| {
        let mut best = 0;
        for (i, l) in layers.iter().enumerate() {
            if key(l) > key(&layers[best]) {
                best = i;
            }
        }
        best
    };
    let b = first_max(&|l| l.cycles);
    let s = first_max(&|l| l.ops);
    let max_cycles = layers[b].cycles;
    let latency_cycles = layers.iter().map(|l| l.cycles).sum();
    let (bottleneck, throughput_setter) = (layers[b].layer.clone(), layers[s].layer.clone());
    layers[b].bottleneck = true;
    Ok(PipelineReport {
        arch: spec.arch_name.clone(),
        clock_hz,
        layers,
        bottleneck,
        max_cycles,
        throughput_setter,
        throughput_fps: clock_hz / max_cycles as f64,
        latency_cycles,
        latency_s: latency_cycles as f64 / clock_hz,
        note: THROUGHPUT_NOTE.into(),
    })
}

fn next_divisor(n: usize, after: usize) -> Option<usize> {
    (after + 1..=n).find(|d| n.is_multiple_of(*d))
}

/// Greedy rate matching under total PE and SIMD budgets (sums over the
/// weighted layers). Starting from PE = SIMD = 1, the current slowest layer
/// repeatedly receives the affordable step to the next divisor of its
/// padded output channels (PE) or fan-in (SIMD) that lowers its cycles the
/// most; the search stops when the slowest layer cannot be sped up.
pub fn suggest_folding(spec: &NetworkSpec, pe_budget: usize, simd_budget: usize) -> Result<FoldingConfig> {
    let shapes = infer_shapes(spec)?;
    let weighted: Vec<usize> = spec.weighted_layers().map(|(i, _)| i).collect();
    let n = weighted.len();
    if pe_budget < n || simd_budget < n {
        let (i, l) = spec
            .weighted_layers()
            .nth(pe_budget.min(simd_budget))
            .expect("budget below layer count");
        return Err(Error::Folding {
            layer: l.name.clone(),
            reason: format!(
                "layer {i} gets no PE/SIMD: budgets {pe_budget}/{simd_budget} are below {n} weighted layers"
            ),
        });
    }
    let mut cfg = FoldingConfig::unfolded(spec);
    let mut pe_left = pe_budget - n;
    let mut simd_left = simd_budget - n;
    loop {
        let cycles: Vec<u64> = weighted
            .iter()
            .zip(&cfg.layers)
            .map(|(&i, &f)| layer_cycles(spec, &shapes, i, f))
            .collect();
        let mut slow = 0;
        for (k, &c) in cycles.iter().enumerate() {
            if c > cycles[slow] {
                slow = k;
            }
        }
        let i = weighted[slow];
        let cur = cfg.layers[slow];
        let co = spec.padded_out_channels(i);
        let wmat = spec.layers[i].fan_in();
        let mut best: Option<(u64, usize, LayerFolding)> = None;
        if let Some(pe) = next_divisor(co, cur.pe).filter(|&p| p - cur.pe <= pe_left) {
            let f = LayerFolding { pe, simd: cur.simd };
            best = Some((layer_cycles(spec, &shapes, i, f), pe - cur.pe, f));
        }
        if let Some(simd) = next_divisor(wmat, cur.simd).filter(|&s| s - cur.simd <= simd_left) {
            let f = LayerFolding { pe: cur.pe, simd };
            let c = layer_cycles(spec, &shapes, i, f);
            let cost = simd - cur.simd;
            if best.is_none_or(|(bc, bcost, _)| (c, cost) < (bc, bcost)) {
                best = Some((c, cost, f));
            }
        }
        match best {
            Some((c, _, f)) if c < cycles[slow] => {
                pe_left -= f.pe - cur.pe;
                simd_left -= f.simd - cur.simd;
                cfg.layers[slow] = f;
            }
            _ => break,
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ncnv() -> (NetworkSpec, ShapeInfo) {
        let spec = NetworkSpec::builtin(Arch::NCnv);
        let shapes = infer_shapes(&spec).unwrap();
        (spec, shapes)
    }

    fn index_of(spec: &NetworkSpec, name: &str) -> usize {
        spec.layers.iter().position(|l| l.name == name).unwrap()
    }

    #[test]
    fn single_layer_cycle_examples() {
        let (spec, shapes) = ncnv();
        let c = |name, pe, simd| layer_cycles(&spec, &shapes, index_of(&spec, name), LayerFolding { pe, simd });
        assert_eq!(c("Conv1_1", 16, 3), 8_100);
        assert_eq!(c("Conv1_2", 16, 16), 7_056);
        assert_eq!(c("FC3", 1, 1), 8_192);
        assert_eq!(c("Pool1", 1, 1), 0);
    }

    #[test]
    fn table_folding_report() {
        let (spec, _) = ncnv();
        let r = pipeline_report(&spec, &FoldingConfig::builtin(Arch::NCnv), DEFAULT_CLOCK_HZ).unwrap();
        assert_eq!(r.cycles(), vec![8100, 7056, 2592, 1800, 1296, 1152, 2048, 2048, 8192]);
        assert_eq!(r.latency_cycles, 34_284);
        assert_eq!(r.bottleneck, "FC3");
        assert_eq!(r.throughput_setter, "Conv1_2");
        assert_eq!(r.throughput_fps * r.max_cycles as f64, DEFAULT_CLOCK_HZ);
        assert!((r.latency_s - 34_284.0 / 1e8).abs() < 1e-15);
        assert!(r.layers.iter().filter(|l| l.bottleneck).count() == 1);
    }

    #[test]
    fn builtin_foldings_divide_exactly() {
        for arch in Arch::ALL {
            let spec = NetworkSpec::builtin(arch);
            let f = FoldingConfig::builtin(arch);
            assert_eq!(f.to_mvtu(&spec).unwrap().len(), spec.weighted_count(), "{arch}");
        }
    }

    #[test]
    fn weight_memory_accounting() {
        let (spec, _) = ncnv();
        let i = index_of(&spec, "Conv1_2");
        let wide = weight_memory(&spec, i, LayerFolding { pe: 16, simd: 16 });
        let narrow = weight_memory(&spec, i, LayerFolding { pe: 1, simd: 16 });
        assert_eq!(wide.total_bits, 2_304);
        assert_eq!(narrow.total_bits, 2_304);
        assert_eq!(narrow.per_pe_depth, 16 * wide.per_pe_depth);
        assert_eq!((wide.fragmentation, narrow.fragmentation), (16, 1));
        let fc3 = weight_memory(&spec, index_of(&spec, "FC3"), LayerFolding { pe: 1, simd: 1 });
        assert_eq!(fc3.total_bits, 8_192);
    }

    #[test]
    fn unfolded_cycles_are_full_products() {
        let (spec, shapes) = ncnv();
        for (i, l) in spec.weighted_layers() {
            let nvec = if l.kind == LayerKind::Conv {
                shapes.layers[i].output.pixels() as u64
            } else {
                1
            };
            let expect = l.fan_in() as u64 * spec.padded_out_channels(i) as u64 * nvec;
            assert_eq!(layer_cycles(&spec, &shapes, i, LayerFolding { pe: 1, simd: 1 }), expect);
        }
    }

    #[test]
    fn more_parallelism_never_costs_cycles() {
        let (spec, shapes) = ncnv();
        for (i, _) in spec.weighted_layers() {
            for pe in 1..=20 {
                for simd in 1..=20 {
                    let c = layer_cycles(&spec, &shapes, i, LayerFolding { pe, simd });
                    assert!(layer_cycles(&spec, &shapes, i, LayerFolding { pe: pe + 1, simd }) <= c);
                    assert!(layer_cycles(&spec, &shapes, i, LayerFolding { pe, simd: simd + 1 }) <= c);
                }
            }
        }
        let fc3 = index_of(&spec, "FC3");
        let one = layer_cycles(&spec, &shapes, fc3, LayerFolding { pe: 2, simd: 1 });
        assert_eq!(2 * one, 8_192);
    }

    #[test]
    fn greedy_matches_table_budget() {
        let (spec, _) = ncnv();
        let table = FoldingConfig::builtin(Arch::NCnv);
        let cfg = suggest_folding(&spec, table.total_pe(), table.total_simd()).unwrap();
        assert!(cfg.total_pe() <= 72 && cfg.total_simd() <= 144);
        let r = pipeline_report(&spec, &cfg, DEFAULT_CLOCK_HZ).unwrap();
        assert!(r.max_cycles <= 8_192, "{:?}", r.cycles());
        cfg.to_mvtu(&spec).unwrap();
        assert_eq!(suggest_folding(&spec, 72, 144).unwrap(), cfg);
    }

    #[test]
    fn greedy_with_minimal_budget_is_unfolded_and_too_small_fails() {
        let (spec, _) = ncnv();
        assert_eq!(suggest_folding(&spec, 9, 9).unwrap(), FoldingConfig::unfolded(&spec));
        assert!(matches!(suggest_folding(&spec, 8, 100), Err(Error::Folding { .. })));
    }

    #[test]
    fn bad_inputs() {
        let (spec, _) = ncnv();
        assert!(pipeline_report(&spec, &FoldingConfig::builtin(Arch::MuCnv), 1e8).is_err());
        assert!(pipeline_report(&spec, &FoldingConfig::builtin(Arch::NCnv), 0.0).is_err());
        let mut f = FoldingConfig::builtin(Arch::NCnv);
        f.layers[0].pe = 0;
        assert!(f.validate(&spec).is_err());
    }
}
