//! Sweeps over fusion-stack structure: unit arrangement, weight sharing,
//! depth and width.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::dmf::{DmfConfig, Variant};
use crate::error::{cfg_err, Error, Result};
use crate::evaluator::{evaluate, extract_features, EvalReport};
use crate::model::FusionReid;
use crate::trainer::Trainer;

/// Toy-scale widths swept by the `dims` preset.
pub const TOY_DIMS: [usize; 4] = [32, 64, 96, 128];

/// One grid cell: the fusion-stack settings that differ from the base
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sweep: String,
    pub variant: Variant,
    pub seu_shared: bool,
    pub mfu_shared: bool,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Cell {
    fn from_base(sweep: &str, dmf: &DmfConfig) -> Self {
        Self {
            sweep: sweep.to_string(),
            variant: dmf.variant,
            seu_shared: dmf.seu_shared,
            mfu_shared: dmf.mfu_shared,
            layers: dmf.layers,
            dim: dmf.dim,
            heads: dmf.heads,
        }
    }

    pub fn apply(&self, base: &DmfConfig) -> DmfConfig {
        DmfConfig {
            variant: self.variant,
            seu_shared: self.seu_shared,
            mfu_shared: self.mfu_shared,
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ..base.clone()
        }
    }
}

/// A named sweep that holds every other setting at the base value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// The four unit arrangements.
    Variants,
    /// Shared or separate SEU and MFU weights.
    Sharing,
    /// Depths 1 to 6.
    Layers,
    /// The toy width set.
    Dims,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::Variants => "variants",
            Sweep::Sharing => "sharing",
            Sweep::Layers => "layers",
            Sweep::Dims => "dims",
        }
    }

    pub fn cells(self, base: &DmfConfig) -> Vec<Cell> {
        let cell = Cell::from_base(self.name(), base);
        match self {
            Sweep::Variants => Variant::ALL
                .iter()
                .map(|&variant| Cell { variant, ..cell.clone() })
                .collect(),
            Sweep::Sharing => [(true, true), (true, false), (false, true), (false, false)]
                .iter()
                .map(|&(seu_shared, mfu_shared)| Cell {
                    seu_shared,
                    mfu_shared,
                    ..cell.clone()
                })
                .collect(),
            Sweep::Layers => (1..=6).map(|layers| Cell { layers, ..cell.clone() }).collect(),
            Sweep::Dims => TOY_DIMS.iter().map(|&dim| Cell { dim, ..cell.clone() }).collect(),
        }
    }
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "variants" => Ok(Sweep::Variants),
            "sharing" => Ok(Sweep::Sharing),
            "layers" => Ok(Sweep::Layers),
            "dims" => Ok(Sweep::Dims),
            other => Err(cfg_err!(
                "unknown sweep `{other}` (expected variants, sharing, layers or dims)"
            )),
        }
    }
}

/// Explicit grid: the product of the listed axes. Omitted axes keep the
/// base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub variants: Vec<Variant>,
    /// `[seu_shared, mfu_shared]` pairs.
    pub sharing: Vec<(bool, bool)>,
    pub layers: Vec<usize>,
    pub dims: Vec<usize>,
    pub heads: Option<usize>,
}

fn or_base<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl GridSpec {
    pub fn cells(&self, base: &DmfConfig) -> Vec<Cell> {
        let variants = or_base(&self.variants, base.variant);
        let sharing = or_base(&self.sharing, (base.seu_shared, base.mfu_shared));
        let layers = or_base(&self.layers, base.layers);
        let dims = or_base(&self.dims, base.dim);
        let mut cells = Vec::new();
        for &variant in &variants {
            for &(seu_shared, mfu_shared) in &sharing {
                for &layers in &layers {
                    for &dim in &dims {
                        cells.push(Cell {
                            sweep: "grid".into(),
                            variant,
                            seu_shared,
                            mfu_shared,
                            layers,
                            dim,
                            heads: self.heads.unwrap_or(base.heads),
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Skipped,
    Failed,
}

/// Result of one cell. Metrics are absent when the cell did not run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub cell: Cell,
    pub htm_params: Option<usize>,
    pub total_params: Option<usize>,
    pub htm_flops: Option<u64>,
    pub final_loss: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub status: Status,
    pub reason: String,
}

impl Row {
    fn skipped(cell: Cell, reason: String) -> Self {
        Self {
            cell,
            htm_params: None,
            total_params: None,
            htm_flops: None,
            final_loss: None,
            map: None,
            rank1: None,
            status: Status::Skipped,
            reason,
        }
    }
}

/// Trains and evaluates the base configuration with `cell` applied.
pub fn run_cell(base: &RunConfig, dataset: &Dataset, cell: &Cell) -> Row {
    let mut cfg = base.clone();
    cfg.model.dmf = cell.apply(&base.model.dmf);
    let model = match FusionReid::new(cfg.model.clone()) {
        Ok(m) => m,
        Err(e) => return Row::skipped(cell.clone(), e.to_string()),
    };
    let counts = match model.dmf.count_params() {
        Ok(c) => c,
        Err(e) => return Row::skipped(cell.clone(), e.to_string()),
    };
    let mut row = Row {
        htm_params: Some(counts.htm_stack),
        total_params: None,
        htm_flops: Some(model.dmf.htm_flops()),
        ..Row::skipped(cell.clone(), String::new())
    };
    let outcome = (|| -> Result<(usize, f64, EvalReport)> {
        let mut trainer = Trainer::new(model, cfg.optim.clone(), cfg.train.clone(), dataset.clone(), cfg.seed)?;
        let total_params = trainer.store.numel();
        let mut last = f64::NAN;
        for _ in 0..trainer.total_steps() {
            last = trainer.step()?.total;
        }
        let (qs, gs) = cfg.eval.policy.splits();
        let pick = |splits: &[Split]| {
            dataset
                .samples
                .iter()
                .filter(|s| splits.contains(&s.split))
                .collect::<Vec<_>>()
        };
        let stats = trainer.data.stats;
        let q = extract_features(&trainer.model, &mut trainer.store, &stats, &pick(qs))?;
        let g = extract_features(&trainer.model, &mut trainer.store, &stats, &pick(gs))?;
        Ok((total_params, last, evaluate(&q, &g)?))
    })();
    match outcome {
        Ok((total, loss, report)) => {
            row.total_params = Some(total);
            row.final_loss = Some(loss);
            row.map = Some(report.map);
            row.rank1 = Some(report.rank(1));
            row.status = Status::Ok;
        }
        Err(e) => {
            row.status = if e.is_input_error() { Status::Skipped } else { Status::Failed };
            row.reason = e.to_string();
        }
    }
    row
}

pub const CSV_HEADER: [&str; 16] = [
    "sweep",
    "variant",
    "seu_shared",
    "mfu_shared",
    "layers",
    "dim",
    "heads",
    "htm_params",
    "total_params",
    "htm_flops",
    "final_loss",
    "mAP",
    "rank1",
    "status",
    "reason",
    "valid",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes rows to CSV in the order given.
pub fn write_csv<W: Write>(out: W, rows: &[Row]) -> Result<()> {
    let wrap = |e: csv::Error| Error::Data(format!("ablation csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(wrap)?;
    for r in rows {
        let c = &r.cell;
        let status = match r.status {
            Status::Ok => "ok",
            Status::Skipped => "skipped",
            Status::Failed => "failed",
        };
        let valid = r.status == Status::Ok && r.final_loss.is_some_and(f64::is_finite);
        w.write_record([
            c.sweep.clone(),
            c.variant.name().to_string(),
            c.seu_shared.to_string(),
            c.mfu_shared.to_string(),
            c.layers.to_string(),
            c.dim.to_string(),
            c.heads.to_string(),
            opt(&r.htm_params),
            opt(&r.total_params),
            opt(&r.htm_flops),
            opt(&r.final_loss),
            opt(&r.map),
            opt(&r.rank1),
            status.to_string(),
            r.reason.clone(),
            valid.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::Data(format!("ablation csv: {e}")))
}

/// Runs every cell in order, writing the CSV after each so partial results
/// survive interruption.
pub fn run_grid(base: &RunConfig, dataset: &Dataset, cells: &[Cell], csv_path: &Path, mut progress: impl FnMut(&Row)) -> Result<Vec<Row>> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let row = run_cell(base, dataset, cell);
        progress(&row);
        rows.push(row);
        let file = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        write_csv(file, &rows)?;
    }
    Ok(rows)
}
