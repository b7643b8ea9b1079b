//! Result files: loss traces and CMC curves as CSV, rank tables as text,
//! and optional PGM dumps of the matching maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ppmn_core::eval::CmcCurve;
use ppmn_core::model::PpmnModel;
use ppmn_core::tensor::Tensor;
use ppmn_core::train::TracePoint;

use crate::error::{CliError, Result};
use crate::netpbm::{encode_pgm, map_to_gray8};

pub fn loss_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("iter,lr,loss\n");
    for point in trace {
        writeln!(out, "{},{},{}", point.iter, point.lr, point.loss).unwrap();
    }
    out
}

pub fn write_loss_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    fs::write(path, loss_csv(trace)).map_err(CliError::io(path))
}

pub fn cmc_csv(curve: &CmcCurve) -> String {
    let mut out = String::from("rank,score\n");
    for (i, score) in curve.ranks.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, score).unwrap();
    }
    out
}

pub fn write_cmc_csv(path: &Path, curve: &CmcCurve) -> Result<()> {
    fs::write(path, cmc_csv(curve)).map_err(CliError::io(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(CliError::io(path))
}

/// Writes the branch, fusion and final correspondence maps for one pair as
/// normalized grayscale PGM images.
pub fn dump_maps(
    model: &PpmnModel,
    probe: &Tensor,
    candidate: &Tensor,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut targets: Vec<_> = model.branch_wires().to_vec();
    targets.push(model.fused_wire());
    targets.push(model.pooled_wire());
    let cache = model
        .graph()
        .forward_to(
            model.params(),
            &[("image_a", probe), ("image_b", candidate)],
            &[],
            &targets,
        )
?;
    let mut written = Vec::new();
    let mut emit = |name: String, map: &Tensor| -> Result<()> {
        let (w, h, gray) = map_to_gray8(map);
        let path = dir.join(name);
        fs::write(&path, encode_pgm(w, h, &gray)).map_err(CliError::io(&path))?;
        written.push(path);
        Ok(())
    };
    for (i, (&wire, &rate)) in model
        .branch_wires()
        .iter()
        .zip(model.config().pyramid_rates.iter())
        .enumerate()
    {
        emit(
            format!("s_branch{i}_rate{rate}.pgm"),
            cache.value(wire).expect("branch evaluated"),
        )?;
    }
    emit(
        "s_fusion.pgm".to_string(),
        cache.value(model.fused_wire()).expect("fusion evaluated"),
    )?;
    emit(
        "s_final.pgm".to_string(),
        cache.value(model.pooled_wire()).expect("pool evaluated"),
    )?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ppmn_core::model::ModelConfig;

    #[test]
    fn loss_csv_schema() {
        let trace = vec![
            TracePoint { iter: 0, lr: 0.01, loss: 0.7 },
            TracePoint { iter: 10, lr: 0.009, loss: 0.5 },
        ];
        let csv = loss_csv(&trace);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("iter,lr,loss"));
        assert_eq!(lines.next(), Some("0,0.01,0.7"));
        assert_eq!(lines.next(), Some("10,0.009,0.5"));
    }

    #[test]
    fn cmc_csv_schema() {
        let curve = CmcCurve {
            ranks: vec![0.5, 1.0],
            probe_count: 2,
            gallery_size: 2,
        };
        let csv = cmc_csv(&curve);
        assert_eq!(csv, "rank,score\n1,0.5\n2,1\n");
    }

    #[test]
    fn map_dump_writes_all_stages() {
        let model = PpmnModel::build(ModelConfig::desk()).unwrap();
        let a = Tensor::from_fn([1, 3, 32, 16], |_, c, h, w| ((c + h + w) % 7) as f32 / 7.0);
        let b = Tensor::from_fn([1, 3, 32, 16], |_, c, h, w| ((2 * c + h * w) % 5) as f32 / 5.0);
        let dir = tempfile::TempDir::new().unwrap();
        let files = dump_maps(&model, &a, &b, dir.path()).unwrap();
        assert_eq!(files.len(), 5); // three branches + fusion + final
        for file in files {
            let bytes = std::fs::read(&file).unwrap();
            assert_eq!(&bytes[..2], b"P5");
        }
    }
}
