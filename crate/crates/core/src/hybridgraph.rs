//! The hybrid connectivity graph: weighted co-visibility edges plus the
//! temporal pose-pose chain, including culled-keyframe control points.
//! Queried by loop closure and both global optimizers.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Matrix7, SimTransform};
use crate::mapping::{KeyframeId, KeyframeState, WorldMap};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("keyframe {0} is not registered in the graph")]
    UnknownKeyframe(KeyframeId),
    #[error("temporal edge endpoints must be consecutive keyframes, got {0} -> {1}")]
    NotConsecutive(KeyframeId, KeyframeId),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Covisibility,
    Temporal,
}

#[derive(Debug, Clone)]
pub struct CovisEdge {
    pub weight: u32,
    /// Relative transform `S_i^-1 * S_j` captured when the edge was created,
    /// scale 1 (monocular scale drift is carried by the temporal chain).
    pub measurement: SimTransform,
}

#[derive(Debug, Clone)]
pub struct TemporalEdge {
    pub measurement: SimTransform,
    pub information: Matrix7,
}

/// Undirected key with the smaller id first.
fn key(a: KeyframeId, b: KeyframeId) -> (KeyframeId, KeyframeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Default)]
pub struct HybridGraph {
    nodes: BTreeMap<KeyframeId, KeyframeState>,
    covis: BTreeMap<(KeyframeId, KeyframeId), CovisEdge>,
    temporal: BTreeMap<(KeyframeId, KeyframeId), TemporalEdge>,
    covis_threshold: u32,
}

impl HybridGraph {
    pub fn new(covis_threshold: u32) -> Self {
        Self {
            covis_threshold,
            ..Default::default()
        }
    }

    pub fn register(&mut self, kf: KeyframeId, state: KeyframeState) {
        self.nodes.insert(kf, state);
    }

    pub fn set_state(&mut self, kf: KeyframeId, state: KeyframeState) {
        if let Some(s) = self.nodes.get_mut(&kf) {
            *s = state;
        }
    }

    pub fn contains(&self, kf: KeyframeId) -> bool {
        self.nodes.contains_key(&kf)
    }

    pub fn nodes(&self) -> impl Iterator<Item = (KeyframeId, KeyframeState)> + '_ {
        self.nodes.iter().map(|(k, s)| (*k, *s))
    }

    pub fn covis_weight(&self, a: KeyframeId, b: KeyframeId) -> Option<u32> {
        self.covis.get(&key(a, b)).map(|e| e.weight)
    }

    pub fn covis_edges(&self) -> impl Iterator<Item = (KeyframeId, KeyframeId, &CovisEdge)> {
        self.covis.iter().map(|((a, b), e)| (*a, *b, e))
    }

    pub fn temporal_edges(
        &self,
    ) -> impl Iterator<Item = (KeyframeId, KeyframeId, &TemporalEdge)> {
        self.temporal.iter().map(|((a, b), e)| (*a, *b, e))
    }

    pub fn n_covis_edges(&self) -> usize {
        self.covis.len()
    }

    pub fn n_temporal_edges(&self) -> usize {
        self.temporal.len()
    }

    /// Recomputes the co-visibility edges of `kf` from the exact
    /// shared-landmark counts in the map. Existing edges whose count fell
    /// below the threshold are removed; new edges snapshot the current
    /// relative pose as their measurement.
    pub fn update_covisibility(&mut self, kf: KeyframeId, map: &WorldMap) {
        let counts = map.shared_counts(kf);
        let my_pose = match map.keyframe(kf) {
            Some(k) => k.pose,
            None => return,
        };
        let stale: Vec<(KeyframeId, KeyframeId)> = self
            .covis
            .keys()
            .filter(|(a, b)| *a == kf || *b == kf)
            .filter(|(a, b)| {
                let other = if *a == kf { *b } else { *a };
                counts.get(&other).copied().unwrap_or(0) < self.covis_threshold
            })
            .copied()
            .collect();
        for k in stale {
            self.covis.remove(&k);
        }
        for (other, count) in counts {
            if count < self.covis_threshold || other == kf {
                continue;
            }
            let k = key(kf, other);
            match self.covis.get_mut(&k) {
                Some(edge) => edge.weight = count,
                None => {
                    let other_pose = match map.keyframe(other) {
                        Some(o) => o.pose,
                        None => continue,
                    };
                    // measurement: S_i^-1 * S_j with i = smaller id.
                    let (pi, pj) = if k.0 == kf {
                        (my_pose, other_pose)
                    } else {
                        (other_pose, my_pose)
                    };
                    let rel = pi.inverse() * pj;
                    self.covis.insert(
                        k,
                        CovisEdge {
                            weight: count,
                            measurement: SimTransform::from_pose(&rel),
                        },
                    );
                }
            }
        }
    }

    /// Adds the pose-pose edge between consecutive keyframes. A duplicate
    /// replaces the stored measurement with a warning.
    pub fn add_temporal_edge(
        &mut self,
        i: KeyframeId,
        j: KeyframeId,
        measurement: SimTransform,
        information: Matrix7,
    ) -> Result<(), GraphError> {
        if !self.nodes.contains_key(&i) {
            return Err(GraphError::UnknownKeyframe(i));
        }
        if !self.nodes.contains_key(&j) {
            return Err(GraphError::UnknownKeyframe(j));
        }
        if j.0 != i.0 + 1 {
            return Err(GraphError::NotConsecutive(i, j));
        }
        if self
            .temporal
            .insert((i, j), TemporalEdge { measurement, information })
            .is_some()
        {
            log::warn!("temporal edge {i} -> {j} replaced");
        }
        Ok(())
    }

    /// Refreshes the measurement of an existing temporal edge (used when the
    /// older endpoint leaves the window with its final locally-optimized
    /// pose).
    pub fn refresh_temporal_measurement(
        &mut self,
        i: KeyframeId,
        j: KeyframeId,
        measurement: SimTransform,
    ) {
        if let Some(edge) = self.temporal.get_mut(&(i, j)) {
            edge.measurement = measurement;
        }
    }

    pub fn neighbors(
        &self,
        kf: KeyframeId,
        kind: Option<EdgeKind>,
        min_weight: u32,
    ) -> Result<Vec<KeyframeId>, GraphError> {
        if !self.nodes.contains_key(&kf) {
            return Err(GraphError::UnknownKeyframe(kf));
        }
        let mut out = std::collections::BTreeSet::new();
        let want_covis = !matches!(kind, Some(EdgeKind::Temporal));
        let want_temporal = !matches!(kind, Some(EdgeKind::Covisibility));
        if want_covis {
            for ((a, b), e) in &self.covis {
                if e.weight >= min_weight {
                    if *a == kf {
                        out.insert(*b);
                    } else if *b == kf {
                        out.insert(*a);
                    }
                }
            }
        }
        if want_temporal {
            for (a, b) in self.temporal.keys() {
                if *a == kf {
                    out.insert(*b);
                } else if *b == kf {
                    out.insert(*a);
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Is there any covis edge between `a` and `b`?
    pub fn covis_connected(&self, a: KeyframeId, b: KeyframeId) -> bool {
        self.covis.contains_key(&key(a, b))
    }

    /// DOT export with node positions for plotting; covis edges carry
    /// `kind=covis`, temporal edges `kind=temporal`, and their weight.
    pub fn export_dot(&self, path: &Path, map: &WorldMap) -> Result<(), GraphError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "digraph hybrid {{")?;
        write_nodes(&mut f, self, map)?;
        for ((a, b), e) in &self.covis {
            writeln!(
                f,
                "  {} -> {} [kind=covis, weight={}];",
                a.0, b.0, e.weight
            )?;
        }
        for (a, b) in self.temporal.keys() {
            writeln!(f, "  {} -> {} [kind=temporal, weight=1];", a.0, b.0)?;
        }
        writeln!(f, "}}")?;
        Ok(())
    }

    /// CSV edge list: `kf_i,kf_j,kind,weight`.
    pub fn export_csv(&self, path: &Path) -> Result<(), GraphError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "kf_i,kf_j,kind,weight")?;
        for ((a, b), e) in &self.covis {
            writeln!(f, "{},{},covis,{}", a.0, b.0, e.weight)?;
        }
        for (a, b) in self.temporal.keys() {
            writeln!(f, "{},{},temporal,1", a.0, b.0)?;
        }
        Ok(())
    }
}

fn write_nodes(
    f: &mut impl Write,
    graph: &HybridGraph,
    map: &WorldMap,
) -> std::io::Result<()> {
    for (id, state) in &graph.nodes {
        let pos = map
            .keyframe(*id)
            .map(|k| k.pose.translation())
            .unwrap_or_else(Vector3::zeros);
        let state = match state {
            KeyframeState::Active => "active",
            KeyframeState::Marginalized => "marginalized",
            KeyframeState::Culled => "culled",
        };
        writeln!(
            f,
            "  {} [pos=\"{:.4},{:.4},{:.4}\", state={}];",
            id.0, pos.x, pos.y, pos.z, state
        )?;
    }
    Ok(())
}
