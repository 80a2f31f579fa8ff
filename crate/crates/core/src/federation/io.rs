//! Metrics CSV and per-client checkpoint directories.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClientRecord, RoundMetrics};
use crate::clustering::ClientId;
use crate::error::Result;
use crate::models::{ModelSpec, ParamVector};

pub const METRICS_HEADER: [&str; 6] = [
    "round",
    "mean_acc",
    "std_acc",
    "grad_norm",
    "uplink",
    "downlink",
];

/// Floats use the shortest round-tripping decimal form, so identical runs give identical bytes.
pub fn write_metrics_csv<W: Write>(w: W, metrics: &[RoundMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for m in metrics {
        out.write_record([
            m.round.to_string(),
            m.mean_acc.to_string(),
            m.std_acc.to_string(),
            m.grad_norm.to_string(),
            m.uplink.to_string(),
            m.downlink.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: ClientId,
    pub file: String,
    pub spec: ModelSpec,
    pub active: bool,
    pub p_k: f64,
    pub last_selected_round: Option<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `client_XXXX.bin` for every client plus `manifest.json`.
pub fn write_checkpoint(dir: &Path, clients: &[ClientRecord]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(clients.len());
    for c in clients {
        let file = format!("client_{:04}.bin", c.id);
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        c.params.write_to(&c.spec, &mut w)?;
        w.flush()?;
        manifest.push(ManifestEntry {
            id: c.id,
            file,
            spec: c.spec,
            active: c.is_active(),
            p_k: c.p_k(),
            last_selected_round: c.last_selected_round,
        });
    }
    let w = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(w, &manifest)?;
    Ok(manifest)
}

pub fn read_checkpoint(dir: &Path) -> Result<Vec<(ManifestEntry, ParamVector)>> {
    let manifest: Vec<ManifestEntry> =
        serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST_FILE))?))?;
    manifest
        .into_iter()
        .map(|e| {
            let params =
                ParamVector::read_from(&e.spec, BufReader::new(File::open(dir.join(&e.file))?))?;
            Ok((e, params))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_classification, split_train_val_test, Leftover};

    #[test]
    fn metrics_csv_layout() {
        let m = RoundMetrics {
            round: 3,
            mean_acc: 0.5,
            std_acc: 0.125,
            grad_norm: 1e-3,
            uplink: 10,
            downlink: 20,
            client_accuracy: vec![],
            client_grad_norms: vec![],
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[m]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,mean_acc,std_acc,grad_norm,uplink,downlink\n3,0.5,0.125,0.001,10,20\n"
        );
    }

    #[test]
    fn checkpoint_roundtrip() {
        let d = generate_synthetic_classification(3, 4, 20, 3.0, 1).unwrap();
        let bundle = split_train_val_test(&d, 40, Leftover::FoldIntoTest, 1);
        let clients: Vec<ClientRecord> = (0..3)
            .map(|i| {
                let spec = if i == 2 {
                    ModelSpec::mlp(4, 5, 3)
                } else {
                    ModelSpec::softmax(4, 3)
                };
                ClientRecord::new(i, spec, bundle.clone(), 9)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), &clients).unwrap();
        assert!(dir.path().join("client_0002.bin").exists());
        let back = read_checkpoint(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (c, (e, p)) in clients.iter().zip(&back) {
            assert_eq!(e.id, c.id);
            assert_eq!(e.spec, c.spec);
            assert_eq!(
                p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                c.params
                    .as_slice()
                    .iter()
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>()
            );
        }
    }
}
