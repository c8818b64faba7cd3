//! Backbone geometry: rigid transforms, per-residue local frames, k-NN
//! graph construction, and the residue featurizer.
#![allow(clippy::needless_range_loop)] // axis-index loops over 3x3 frames
//!
//! Everything here runs in f64 regardless of the model element type, so
//! the graph topology and features are identical between f32 and f64
//! model instantiations.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::BackboneRecord;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Proper rigid motion: rotation (det = +1) plus translation, in angstroms.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Uniform random rotation (normalized quaternion) and a translation
    /// drawn uniformly from [-10, 10] angstroms per axis.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let q: [f64; 4] = loop {
            let q = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n2: f64 = q.iter().map(|v| v * v).sum();
            if n2 > 1e-3 && n2 <= 1.0 {
                let n = n2.sqrt();
                break [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
            }
        };
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        let rotation = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        let translation = [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        ];
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Rotate a direction vector (no translation).
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = self.translation;
        let inv_t = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        RigidTransform {
            rotation: rt,
            translation: inv_t,
        }
    }

    /// Rotation orthonormality and handedness check.
    pub fn is_proper(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += r[k][i] * r[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (v - expect).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - 1.0).abs() <= tol
    }

    /// Transform every unmasked coordinate of a record.
    pub fn apply_to_record(&self, record: &BackboneRecord) -> BackboneRecord {
        let mut out = record.clone();
        for (i, atoms) in out.coords.iter_mut().enumerate() {
            if record.mask[i] {
                for a in atoms.iter_mut() {
                    *a = self.apply(*a);
                }
            }
        }
        out
    }
}

/// Per-residue orthonormal basis, columns (e1, e2, e3), origin at CA.
///
/// e1 points along C-CA, e2 is the N-CA component orthogonal to e1, and
/// e3 = e1 x e2 keeps the basis right-handed. Projecting a direction
/// vector through `to_local` yields rotation-invariant coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFrame {
    pub origin: Vec3,
    /// Column-major orthonormal axes: `axes[row][col]`, col = basis index.
    pub axes: [[f64; 3]; 3],
}

const COLLINEAR_TOL: f64 = 1e-8;

/// Gram-Schmidt frame from backbone atoms. Fails when the atoms are
/// collinear or coincident; callers mask such residues out.
pub fn local_frame(n: Vec3, ca: Vec3, c: Vec3) -> Result<LocalFrame> {
    let u1 = sub(c, ca);
    let u2 = sub(n, ca);
    let n1 = norm(u1);
    if n1 < COLLINEAR_TOL {
        return Err(Error::Frame("C and CA coincide".into()));
    }
    let e1 = [u1[0] / n1, u1[1] / n1, u1[2] / n1];
    let proj = dot(u2, e1);
    let v2 = [
        u2[0] - proj * e1[0],
        u2[1] - proj * e1[1],
        u2[2] - proj * e1[2],
    ];
    let n2 = norm(v2);
    if n2 < COLLINEAR_TOL {
        return Err(Error::Frame("N, CA, C are collinear".into()));
    }
    let e2 = [v2[0] / n2, v2[1] / n2, v2[2] / n2];
    let e3 = cross(e1, e2);
    Ok(LocalFrame {
        origin: ca,
        axes: [
            [e1[0], e2[0], e3[0]],
            [e1[1], e2[1], e3[1]],
            [e1[2], e2[2], e3[2]],
        ],
    })
}

impl LocalFrame {
    /// Express a direction vector in this frame (R^T v).
    pub fn to_local(&self, v: Vec3) -> Vec3 {
        let a = &self.axes;
        [
            a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
            a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
            a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
        ]
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let a = &self.axes;
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += a[k][i] * a[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (v - expect).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn det(&self) -> f64 {
        let a = &self.axes;
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    }
}

/// Signed dihedral angle of the chain p0-p1-p2-p3, in radians.
pub fn dihedral(p0: Vec3, p1: Vec3, p2: Vec3, p3: Vec3) -> f64 {
    let b1 = sub(p1, p0);
    let b2 = sub(p2, p1);
    let b3 = sub(p3, p2);
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let m1 = cross(n1, normalize(b2));
    let x = dot(n1, n2);
    let y = dot(m1, n2);
    y.atan2(x)
}

/// Directed edge list: `edges[e] = (src, dst)` meaning src sends a message
/// to dst. Built over unmasked residues only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeIndex {
    pub edges: Vec<(usize, usize)>,
}

impl EdgeIndex {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|&(s, _)| s).collect()
    }

    pub fn destinations(&self) -> Vec<usize> {
        self.edges.iter().map(|&(_, d)| d).collect()
    }
}

/// k-nearest-neighbor in-edges by CA distance among unmasked residues.
/// Ties break toward the lower residue index so the edge set is a pure
/// function of the distance multiset.
pub fn build_knn_graph(record: &BackboneRecord, k: usize) -> Result<EdgeIndex> {
    let unmasked: Vec<usize> = (0..record.len()).filter(|&i| record.mask[i]).collect();
    if unmasked.len() < 2 {
        return Err(Error::Graph(format!(
            "need at least 2 unmasked residues, found {}",
            unmasked.len()
        )));
    }
    let mut edges = Vec::new();
    for &dst in &unmasked {
        let ca_dst = record.ca(dst);
        let mut cands: Vec<(f64, usize)> = unmasked
            .iter()
            .filter(|&&src| src != dst)
            .map(|&src| (dist(record.ca(src), ca_dst), src))
            .collect();
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        // Emit the selected neighbors in index order so the edge list is a
        // function of the edge set alone, stable under rigid transforms.
        let mut picked: Vec<usize> = cands.iter().take(k).map(|&(_, src)| src).collect();
        picked.sort_unstable();
        for src in picked {
            edges.push((src, dst));
        }
    }
    Ok(EdgeIndex { edges })
}

/// Featurizer settings. Individual blocks can be switched off to ablate
/// their contribution; widths below are the defaults used throughout.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeaturizerConfig {
    pub k_neighbors: usize,
    pub rbf_count: usize,
    pub rbf_min: f64,
    pub rbf_max: f64,
    /// Gaussian width; defaults to the center spacing.
    pub rbf_sigma: f64,
    /// Number of sinusoidal features for the sequence offset (half sin,
    /// half cos).
    pub offset_features: usize,
    pub with_dihedrals: bool,
    pub with_orientations: bool,
    pub with_rbf: bool,
    pub with_offset: bool,
    /// Append frame-projected copies of every vector channel to the
    /// scalar features.
    pub with_frame_projection: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            k_neighbors: 30,
            rbf_count: 16,
            rbf_min: 0.0,
            rbf_max: 20.0,
            rbf_sigma: 20.0 / 16.0,
            offset_features: 16,
            with_dihedrals: true,
            with_orientations: true,
            with_rbf: true,
            with_offset: true,
            with_frame_projection: true,
        }
    }
}

impl FeaturizerConfig {
    /// Width of the node scalar feature block.
    pub fn node_scalar_dim(&self) -> usize {
        let mut d = 0;
        if self.with_dihedrals {
            d += 9; // sin/cos of phi, psi, omega plus 3 validity bits
        }
        if self.with_frame_projection {
            d += 3 * self.node_vector_dim();
        }
        d.max(1)
    }

    pub fn node_vector_dim(&self) -> usize {
        if self.with_orientations {
            4 // forward/backward CA units, CA->N, CA->C
        } else {
            0
        }
    }

    pub fn edge_scalar_dim(&self) -> usize {
        let mut d = 0;
        if self.with_rbf {
            d += self.rbf_count;
        }
        if self.with_offset {
            d += self.offset_features;
        }
        if self.with_frame_projection {
            d += 3 * self.edge_vector_dim();
        }
        d.max(1)
    }

    pub fn edge_vector_dim(&self) -> usize {
        1 // unit CA displacement toward the source
    }
}

/// Geometric featurization of one record: invariant scalar channels,
/// equivariant vector channels (as x/y/z planes), edges, and frames.
#[derive(Debug, Clone)]
pub struct ProteinGraph {
    pub n: usize,
    pub node_scalars: Array2<f64>,
    /// Coordinate planes, each `n x dv`.
    pub node_vectors: [Array2<f64>; 3],
    pub edges: EdgeIndex,
    pub edge_scalars: Array2<f64>,
    pub edge_vectors: [Array2<f64>; 3],
    /// Frame per residue; None where masked or degenerate.
    pub frames: Vec<Option<LocalFrame>>,
    /// Effective mask: record mask AND frame construction succeeded.
    pub mask: Vec<bool>,
}

fn rbf_expand(d: f64, cfg: &FeaturizerConfig, out: &mut Vec<f64>) {
    let count = cfg.rbf_count;
    for i in 0..count {
        let center = if count == 1 {
            cfg.rbf_min
        } else {
            cfg.rbf_min + (cfg.rbf_max - cfg.rbf_min) * i as f64 / (count - 1) as f64
        };
        let z = (d - center) / cfg.rbf_sigma;
        out.push((-0.5 * z * z).exp());
    }
}

fn offset_encode(offset: i64, count: usize, out: &mut Vec<f64>) {
    let pairs = count / 2;
    for i in 0..pairs {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / count as f64);
        let x = offset as f64 * freq;
        out.push(x.sin());
        out.push(x.cos());
    }
}

/// Build the full featurized graph for a record.
pub fn featurize(record: &BackboneRecord, cfg: &FeaturizerConfig) -> Result<ProteinGraph> {
    let n = record.len();
    // Frames first: residues whose frame is degenerate drop out of the
    // effective mask along with everything masked upstream.
    let mut frames: Vec<Option<LocalFrame>> = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        if record.mask[i] {
            match local_frame(
                record.coords[i][0],
                record.coords[i][1],
                record.coords[i][2],
            ) {
                Ok(f) => {
                    frames.push(Some(f));
                    mask.push(true);
                }
                Err(_) => {
                    frames.push(None);
                    mask.push(false);
                }
            }
        } else {
            frames.push(None);
            mask.push(false);
        }
    }
    let effective = BackboneRecord {
        mask: mask.clone(),
        ..record.clone()
    };
    let edges = build_knn_graph(&effective, cfg.k_neighbors)?;

    // Node vector channels: forward/backward CA units, CA->N, CA->C.
    let dv = cfg.node_vector_dim().max(1);
    let mut nvx = Array2::zeros((n, dv));
    let mut nvy = Array2::zeros((n, dv));
    let mut nvz = Array2::zeros((n, dv));
    let mut node_vecs: Vec<[Vec3; 4]> = vec![[[0.0; 3]; 4]; n];
    if cfg.with_orientations {
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let ca = record.ca(i);
            let mut chans = [[0.0f64; 3]; 4];
            if i + 1 < n && mask[i + 1] {
                chans[0] = normalize(sub(record.ca(i + 1), ca));
            }
            if i > 0 && mask[i - 1] {
                chans[1] = normalize(sub(record.ca(i - 1), ca));
            }
            chans[2] = normalize(sub(record.coords[i][0], ca));
            chans[3] = normalize(sub(record.coords[i][2], ca));
            node_vecs[i] = chans;
            for (c, v) in chans.iter().enumerate() {
                nvx[(i, c)] = v[0];
                nvy[(i, c)] = v[1];
                nvz[(i, c)] = v[2];
            }
        }
    }

    // Node scalars: dihedral sin/cos with validity bits, then invariant
    // frame projections of the node vector channels.
    let ds = cfg.node_scalar_dim();
    let mut node_scalars = Array2::zeros((n, ds));
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let mut feats: Vec<f64> = Vec::with_capacity(ds);
        if cfg.with_dihedrals {
            let (mut phi, mut psi, mut omega) = (None, None, None);
            if i > 0 && mask[i - 1] {
                phi = Some(dihedral(
                    record.coords[i - 1][2],
                    record.coords[i][0],
                    record.coords[i][1],
                    record.coords[i][2],
                ));
                omega = Some(dihedral(
                    record.coords[i - 1][1],
                    record.coords[i - 1][2],
                    record.coords[i][0],
                    record.coords[i][1],
                ));
            }
            if i + 1 < n && mask[i + 1] {
                psi = Some(dihedral(
                    record.coords[i][0],
                    record.coords[i][1],
                    record.coords[i][2],
                    record.coords[i + 1][0],
                ));
            }
            for angle in [phi, psi, omega] {
                match angle {
                    Some(a) => {
                        feats.push(a.sin());
                        feats.push(a.cos());
                    }
                    None => {
                        feats.push(0.0);
                        feats.push(0.0);
                    }
                }
            }
            for angle in [phi, psi, omega] {
                feats.push(if angle.is_some() { 1.0 } else { 0.0 });
            }
        }
        if cfg.with_frame_projection {
            let frame = frames[i].as_ref().expect("unmasked node has frame");
            for c in 0..cfg.node_vector_dim() {
                let local = frame.to_local(node_vecs[i][c]);
                feats.extend_from_slice(&local);
            }
        }
        if feats.is_empty() {
            feats.push(1.0); // degenerate config: constant node feature
        }
        for (j, v) in feats.iter().enumerate() {
            node_scalars[(i, j)] = *v;
        }
    }

    // Edge features.
    let es = cfg.edge_scalar_dim();
    let ev = cfg.edge_vector_dim();
    let ne = edges.len();
    let mut edge_scalars = Array2::zeros((ne, es));
    let mut evx = Array2::zeros((ne, ev));
    let mut evy = Array2::zeros((ne, ev));
    let mut evz = Array2::zeros((ne, ev));
    for (e, &(src, dst)) in edges.edges.iter().enumerate() {
        let disp = sub(record.ca(src), record.ca(dst));
        let d = norm(disp);
        let unit = if d > 0.0 {
            [disp[0] / d, disp[1] / d, disp[2] / d]
        } else {
            [0.0; 3]
        };
        evx[(e, 0)] = unit[0];
        evy[(e, 0)] = unit[1];
        evz[(e, 0)] = unit[2];
        let mut feats: Vec<f64> = Vec::with_capacity(es);
        if cfg.with_rbf {
            rbf_expand(d, cfg, &mut feats);
        }
        if cfg.with_offset {
            offset_encode(src as i64 - dst as i64, cfg.offset_features, &mut feats);
        }
        if cfg.with_frame_projection {
            let frame = frames[dst].as_ref().expect("edge endpoints are unmasked");
            feats.extend_from_slice(&frame.to_local(unit));
        }
        if feats.is_empty() {
            feats.push(1.0);
        }
        for (j, v) in feats.iter().enumerate() {
            edge_scalars[(e, j)] = *v;
        }
    }

    let graph = ProteinGraph {
        n,
        node_scalars,
        node_vectors: [nvx, nvy, nvz],
        edges,
        edge_scalars,
        edge_vectors: [evx, evy, evz],
        frames,
        mask,
    };
    debug_assert!(graph.all_finite());
    Ok(graph)
}

impl ProteinGraph {
    /// Every emitted feature is finite (masked rows are zeros).
    pub fn all_finite(&self) -> bool {
        self.node_scalars.iter().all(|v| v.is_finite())
            && self
                .node_vectors
                .iter()
                .all(|p| p.iter().all(|v| v.is_finite()))
            && self.edge_scalars.iter().all(|v| v.is_finite())
            && self
                .edge_vectors
                .iter()
                .all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// In-degree per node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n];
        for &(_, dst) in &self.edges.edges {
            deg[dst] += 1;
        }
        deg
    }
}
