//! Atlas graph export: detected part boxes linked to their most similar
//! box in another image, with the anchors that drive each match.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{detect_all, AnchorBank, DetectionParams};
use crate::dataset::Dataset;
use crate::embeddings::{AnchorDetections, ImageDetections};
use crate::error::{Error, Result};
use crate::eval::matching::{match_vector, MatchVariant};
use crate::geometry::{rho, OverlapConfig, Region};
use crate::linalg::dot;
use crate::mil::PartModel;

/// Contributions kept per edge.
pub const MAX_CONTRIBUTIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasBox {
    pub concept: String,
    #[serde(rename = "box")]
    pub region: Region,
    pub score: f64,
    pub proposal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasNode {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<AtlasBox>,
}

/// An endpoint: node index and box index within the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoxRef {
    pub node: usize,
    #[serde(rename = "box")]
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub anchor: usize,
    pub value: f64,
    /// The anchor's detection that shapes the geometry of each endpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_anchor_box: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_anchor_box: Option<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasEdge {
    pub source: BoxRef,
    pub target: BoxRef,
    pub similarity: f64,
    /// Largest per-anchor contributions, descending, at most
    /// [`MAX_CONTRIBUTIONS`].
    pub contributions: Vec<Contribution>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AtlasGraph {
    pub nodes: Vec<AtlasNode>,
    pub edges: Vec<AtlasEdge>,
}

impl AtlasGraph {
    fn get(&self, r: BoxRef) -> Option<&AtlasBox> {
        self.nodes.get(r.node)?.boxes.get(r.index)
    }

    /// Checks that edge endpoints exist and contributions are sorted and
    /// capped.
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.edges.iter().enumerate() {
            if self.get(e.source).is_none() || self.get(e.target).is_none() {
                return Err(Error::InvalidInput(format!("edge {i} has a dangling endpoint")));
            }
            if e.contributions.len() > MAX_CONTRIBUTIONS {
                return Err(Error::InvalidInput(format!(
                    "edge {i} lists {} contributions",
                    e.contributions.len()
                )));
            }
            if e.contributions.windows(2).any(|w| w[0].value < w[1].value) {
                return Err(Error::InvalidInput(format!(
                    "edge {i} contributions are not sorted"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasParams {
    /// Boxes kept per part model and image.
    pub boxes_per_part: usize,
    pub nms_iou: f64,
    /// Edges kept overall, strongest first.
    pub top_edges: usize,
    pub detection: DetectionParams,
    pub overlap: OverlapConfig,
}

impl Default for AtlasParams {
    fn default() -> Self {
        Self {
            boxes_per_part: 1,
            nms_iou: 0.3,
            top_edges: 100,
            detection: DetectionParams::default(),
            overlap: OverlapConfig::default(),
        }
    }
}

/// Per-anchor split of `<u, v>` for appearance-major Kronecker vectors:
/// entry `k` sums the coordinates `i * K + k`. The entries add up to the
/// full inner product.
pub fn anchor_contributions(u: &[f64], v: &[f64], anchors: usize) -> Vec<f64> {
    let mut out = vec![0.0; anchors];
    if anchors == 0 {
        return out;
    }
    for (j, (a, b)) in u.iter().zip(v).enumerate() {
        out[j % anchors] += a * b;
    }
    out
}

/// The detection of anchor `k` that maximizes `rho * score` for `r`.
fn shaping_detection(
    r: &Region,
    dets: &ImageDetections,
    k: usize,
    overlap: &OverlapConfig,
) -> Option<Region> {
    dets.per_anchor
        .get(k)?
        .iter()
        .filter(|d| d.score > 0.0)
        .map(|d| (rho(r, &d.region, overlap) * d.score, d.region))
        .fold(None, |best: Option<(f64, Region)>, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, r)| r)
}

/// Detects parts on every image, then links each box to the box of another
/// image with the highest normalized appearance-geometry similarity (ties
/// go to the earliest box).
pub fn export_atlas(
    models: &[PartModel],
    bank: &AnchorBank,
    ds: &Dataset,
    params: &AtlasParams,
) -> Result<AtlasGraph> {
    let store = &ds.store;
    let dets = detect_all(bank, store, &params.detection)?;
    let nodes = (0..store.len())
        .into_par_iter()
        .map(|i| node(models, ds, &dets, i, params))
        .collect::<Result<Vec<_>>>()?;

    let refs: Vec<BoxRef> = nodes
        .iter()
        .enumerate()
        .flat_map(|(n, node)| (0..node.boxes.len()).map(move |b| BoxRef { node: n, index: b }))
        .collect();
    let vectors = refs
        .par_iter()
        .map(|r| {
            let b = &nodes[r.node].boxes[r.index];
            match_vector(
                store,
                r.node,
                b.proposal,
                Some(dets.image(r.node)?),
                MatchVariant::AnchorAg,
                &params.overlap,
                true,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let k = bank.len();
    let mut edges: Vec<AtlasEdge> = refs
        .par_iter()
        .enumerate()
        .filter_map(|(s, src)| {
            let best = refs
                .iter()
                .enumerate()
                .filter(|(_, t)| t.node != src.node)
                .map(|(t, _)| (t, dot(&vectors[s], &vectors[t])))
                .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                    Some(a) if a.1 >= cur.1 => Some(a),
                    _ => Some(cur),
                })?;
            let (t, similarity) = best;
            let tgt = refs[t];
            let parts = anchor_contributions(&vectors[s], &vectors[t], k);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| parts[b].total_cmp(&parts[a]).then(a.cmp(&b)));
            let src_box = nodes[src.node].boxes[src.index].region;
            let tgt_box = nodes[tgt.node].boxes[tgt.index].region;
            let contributions = order
                .into_iter()
                .take(MAX_CONTRIBUTIONS)
                .map(|a| Contribution {
                    anchor: a,
                    value: parts[a],
                    source_anchor_box: dets
                        .images
                        .get(src.node)
                        .and_then(|d| shaping_detection(&src_box, d, a, &params.overlap)),
                    target_anchor_box: dets
                        .images
                        .get(tgt.node)
                        .and_then(|d| shaping_detection(&tgt_box, d, a, &params.overlap)),
                })
                .collect();
            Some(AtlasEdge {
                source: *src,
                target: tgt,
                similarity,
                contributions,
            })
        })
        .collect();
    edges.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(a.source.cmp(&b.source))
    });
    edges.truncate(params.top_edges);
    Ok(AtlasGraph { nodes, edges })
}

fn node(
    models: &[PartModel],
    ds: &Dataset,
    dets: &AnchorDetections,
    i: usize,
    params: &AtlasParams,
) -> Result<AtlasNode> {
    let entry = ds.store.image(i);
    let mut boxes = Vec::new();
    for m in models {
        let d = if m.variant().has_geometry() {
            Some(dets.image(i)?)
        } else {
            None
        };
        for det in m.detect(&ds.store, i, d, params.boxes_per_part, params.nms_iou)? {
            let proposal = entry.proposal_index(&det.region).ok_or_else(|| {
                Error::ProposalNotFound {
                    image: entry.id.clone(),
                    region: det.region.to_string(),
                }
            })?;
            boxes.push(AtlasBox {
                concept: m.concept.clone(),
                region: det.region,
                score: det.score,
                proposal,
            });
        }
    }
    Ok(AtlasNode {
        image: entry.id.clone(),
        uri: ds.meta.get(i).and_then(|m| m.uri.clone()),
        width: entry.width,
        height: entry.height,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contributions_split_inner_product() {
        let u = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        let v = [1.0, 2.0, -1.0, 0.5, 0.25, 1.5];
        let parts = anchor_contributions(&u, &v, 3);
        assert_eq!(parts.len(), 3);
        assert!((parts[0] - (0.1 * 1.0 + 0.4 * 0.5)).abs() < 1e-15);
        assert!((parts.iter().sum::<f64>() - dot(&u, &v)).abs() < 1e-12);
    }

    #[test]
    fn empty_graph_is_valid() {
        AtlasGraph::default().validate().unwrap();
    }
}
