//! Document ranking by mean pre-pass CER, and pruning of the easiest documents.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::synthdoc::SynthDocument;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRank {
    pub document_id: String,
    pub mean_cer: f64,
    pub strip_count: usize,
}

/// Highest mean CER first, ties by document id.
pub fn rank_documents<'a>(
    documents: impl IntoIterator<Item = &'a SynthDocument>,
    prepass_cers: &BTreeMap<String, f64>,
) -> Result<Vec<DocumentRank>> {
    let mut ranked = Vec::new();
    for doc in documents {
        if doc.strip_ids.is_empty() {
            return Err(Error::InvalidState(format!("document {} has no strips", doc.document_id)));
        }
        let mut sum = 0.0;
        for id in &doc.strip_ids {
            sum += prepass_cers
                .get(id)
                .ok_or_else(|| Error::InvalidState(format!("missing pre-pass CER for strip {id}")))?;
        }
        ranked.push(DocumentRank {
            document_id: doc.document_id.clone(),
            mean_cer: sum / doc.strip_ids.len() as f64,
            strip_count: doc.strip_ids.len(),
        });
    }
    ranked.sort_by(|a, b| b.mean_cer.total_cmp(&a.mean_cer).then_with(|| a.document_id.cmp(&b.document_id)));
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub kept: Vec<DocumentRank>,
    pub removed: Vec<DocumentRank>,
}

impl PruneOutcome {
    pub fn kept_ids(&self) -> BTreeSet<String> {
        self.kept.iter().map(|d| d.document_id.clone()).collect()
    }

    pub fn removed_strips(&self) -> usize {
        self.removed.iter().map(|d| d.strip_count).sum()
    }

    pub fn kept_strips(&self) -> usize {
        self.kept.iter().map(|d| d.strip_count).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let ctx = |e: csv::Error| Error::parse("prune report csv", e.to_string());
        w.write_record(["document_id", "mean_cer", "kept"]).map_err(ctx)?;
        for (doc, kept) in self.kept.iter().map(|d| (d, true)).chain(self.removed.iter().map(|d| (d, false))) {
            w.write_record([doc.document_id.as_str(), &doc.mean_cer.to_string(), if kept { "true" } else { "false" }])
                .map_err(ctx)?;
        }
        w.flush().map_err(|e| Error::parse("prune report csv", e.to_string()))?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Drops the `floor(p * n)` lowest-ranked documents.
pub fn prune(ranked: &[DocumentRank], prune_fraction: f64) -> Result<PruneOutcome> {
    if !(0.0..1.0).contains(&prune_fraction) {
        return Err(Error::InvalidArgument(format!("prune fraction must lie in [0, 1), got {prune_fraction}")));
    }
    let remove = (prune_fraction * ranked.len() as f64).floor() as usize;
    let keep = ranked.len() - remove;
    Ok(PruneOutcome {
        kept: ranked[..keep].to_vec(),
        removed: ranked[keep..].to_vec(),
    })
}
