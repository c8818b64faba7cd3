//! Structural encoder: geometric vector perceptron layers with full graph
//! convolution, producing rotation/translation-invariant per-residue
//! features.
#![allow(clippy::needless_range_loop)] // coordinate-plane index loops
//!
//! Vector channels are carried as three coordinate planes (`n x dv`
//! arrays for x, y, z). Channel mixing applies the same weight matrix to
//! each plane, which is exactly what makes the vector path equivariant:
//! rotating the input planes and mixing channels commute.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::ProteinGraph;
use crate::nn::{dropout, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{Param, Scalar, Tensor};

/// Epsilon inside vector-norm square roots.
pub const NORM_EPS: f64 = 1e-8;

/// Paired invariant-scalar and equivariant-vector node features.
pub struct ScalarVector<F: Scalar> {
    pub s: Tensor<F>,
    /// x/y/z coordinate planes, each `n x dv`.
    pub v: [Tensor<F>; 3],
}

impl<F: Scalar> ScalarVector<F> {
    pub fn rows(&self) -> usize {
        self.s.nrows()
    }

    pub fn vector_dim(&self) -> usize {
        self.v[0].ncols()
    }
}

pub fn cast_array<F: Scalar>(a: &Array2<f64>) -> Array2<F> {
    a.mapv(F::of_f64)
}

/// Structural encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GvpConfig {
    pub node_scalar_in: usize,
    pub node_vector_in: usize,
    pub edge_scalar_in: usize,
    pub edge_vector_in: usize,
    pub hidden_scalars: usize,
    pub hidden_vectors: usize,
    pub edge_hidden_scalars: usize,
    pub edge_hidden_vectors: usize,
    pub layers: usize,
    /// GVPs in each convolution's message function.
    pub message_gvps: usize,
    /// GVPs in each convolution's pointwise feed-forward.
    pub ff_gvps: usize,
    pub dropout: f64,
    /// Output width of the invariant encoding (matches the contextual
    /// module embedding width; no separate projection exists downstream).
    pub out_dim: usize,
}

impl Default for GvpConfig {
    fn default() -> Self {
        GvpConfig {
            node_scalar_in: 21,
            node_vector_in: 4,
            edge_scalar_in: 35,
            edge_vector_in: 1,
            hidden_scalars: 1024,
            hidden_vectors: 256,
            edge_hidden_scalars: 32,
            edge_hidden_vectors: 1,
            layers: 4,
            message_gvps: 2,
            ff_gvps: 2,
            dropout: 0.1,
            out_dim: 512,
        }
    }
}

/// One geometric vector perceptron.
///
/// Scalars: `s' = relu(W_m [s ; ||W_h V||])`. Vectors: `v' =
/// sigmoid(W_g s') * (W_v W_h V)` — the gate is built from the invariant
/// scalar path, so the vector path stays equivariant and zero vectors map
/// to zero vectors.
pub struct GvpLayer<F: Scalar> {
    wh: Param<F>,
    wv: Param<F>,
    wm: Linear<F>,
    wg: Linear<F>,
    scalar_act: bool,
}

impl<F: Scalar> GvpLayer<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        s_in: usize,
        v_in: usize,
        s_out: usize,
        v_out: usize,
        scalar_act: bool,
    ) -> Self {
        let h = v_in.max(v_out).max(1);
        GvpLayer {
            wh: store.create(&format!("{name}.wh"), v_in, h, Init::Orthogonal),
            wv: store.create(&format!("{name}.wv"), h, v_out, Init::Orthogonal),
            wm: Linear::new(
                store,
                &format!("{name}.wm"),
                s_in + h,
                s_out,
                Init::UniformFanIn,
                true,
            ),
            wg: Linear::new(
                store,
                &format!("{name}.wg"),
                s_out,
                v_out,
                Init::UniformFanIn,
                true,
            ),
            scalar_act,
        }
    }

    pub fn forward(&self, x: &ScalarVector<F>) -> ScalarVector<F> {
        let wh = self.wh.leaf();
        let vh: Vec<Tensor<F>> = x.v.iter().map(|p| p.matmul(&wh)).collect();
        let vnorm = Tensor::norm3(&vh[0], &vh[1], &vh[2], F::of_f64(NORM_EPS));
        let s_cat = Tensor::concat_cols(&[x.s.clone(), vnorm]);
        let s_pre = self.wm.forward(&s_cat);
        let s_out = if self.scalar_act { s_pre.relu() } else { s_pre };
        let gate = self.wg.forward(&s_out).sigmoid();
        let wv = self.wv.leaf();
        let v_out: Vec<Tensor<F>> = vh.iter().map(|p| p.matmul(&wv).mul(&gate)).collect();
        ScalarVector {
            s: s_out,
            v: [v_out[0].clone(), v_out[1].clone(), v_out[2].clone()],
        }
    }
}

fn gvp_stack<F: Scalar>(
    store: &mut ParamStore<F>,
    name: &str,
    count: usize,
    s_in: usize,
    v_in: usize,
    s_out: usize,
    v_out: usize,
) -> Vec<GvpLayer<F>> {
    (0..count)
        .map(|i| {
            let (si, vi) = if i == 0 { (s_in, v_in) } else { (s_out, v_out) };
            GvpLayer::new(store, &format!("{name}.gvp{i}"), si, vi, s_out, v_out, true)
        })
        .collect()
}

fn run_stack<F: Scalar>(stack: &[GvpLayer<F>], x: ScalarVector<F>) -> ScalarVector<F> {
    stack.iter().fold(x, |acc, layer| layer.forward(&acc))
}

/// Equivariance-preserving normalization of vector channels: divide every
/// channel by the RMS channel norm per node.
fn vector_norm<F: Scalar>(v: &[Tensor<F>; 3]) -> [Tensor<F>; 3] {
    let dv = v[0].ncols();
    if dv == 0 {
        return v.clone();
    }
    let sq = v[0].mul(&v[0]).add(&v[1].mul(&v[1])).add(&v[2].mul(&v[2]));
    let ms = sq
        .sum_cols()
        .scale(F::of_f64(1.0 / dv as f64))
        .add_scalar(F::of_f64(NORM_EPS));
    let inv = ms.sqrt().recip();
    [
        v[0].rows_scale(&inv),
        v[1].rows_scale(&inv),
        v[2].rows_scale(&inv),
    ]
}

/// Dropout for vector channels: one mask shared by all three coordinate
/// planes so whole vectors drop together (anything else would break
/// equivariance).
fn dropout_vec<F: Scalar>(
    v: &[Tensor<F>; 3],
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> [Tensor<F>; 3] {
    match rng {
        Some(rng) if p > 0.0 => {
            use rand::Rng as _;
            let keep = 1.0 - p;
            let mask = Array2::from_shape_fn((v[0].nrows(), v[0].ncols()), |_| {
                if rng.gen_range(0.0..1.0) < keep {
                    F::of_f64(1.0 / keep)
                } else {
                    F::zero()
                }
            });
            let mask = Tensor::constant(mask);
            [v[0].mul(&mask), v[1].mul(&mask), v[2].mul(&mask)]
        }
        _ => v.clone(),
    }
}

/// One message-passing step: GVP over concatenated (destination node,
/// edge, source node) features, mean-aggregated over in-edges, residual
/// update with normalization, then a pointwise feed-forward GVP stack
/// with its own residual and normalization.
pub struct GvpConvLayer<F: Scalar> {
    message: Vec<GvpLayer<F>>,
    ff: Vec<GvpLayer<F>>,
    ln_msg: LayerNorm<F>,
    ln_ff: LayerNorm<F>,
    dropout_p: f64,
}

impl<F: Scalar> GvpConvLayer<F> {
    pub fn new(store: &mut ParamStore<F>, name: &str, cfg: &GvpConfig) -> Self {
        let (hs, hv) = (cfg.hidden_scalars, cfg.hidden_vectors);
        let (es, ev) = (cfg.edge_hidden_scalars, cfg.edge_hidden_vectors);
        GvpConvLayer {
            message: gvp_stack(
                store,
                &format!("{name}.msg"),
                cfg.message_gvps.max(1),
                2 * hs + es,
                2 * hv + ev,
                hs,
                hv,
            ),
            ff: gvp_stack(
                store,
                &format!("{name}.ff"),
                cfg.ff_gvps.max(1),
                hs,
                hv,
                hs,
                hv,
            ),
            ln_msg: LayerNorm::new(store, &format!("{name}.ln_msg"), hs),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), hs),
            dropout_p: cfg.dropout,
        }
    }

    fn forward(
        &self,
        x: &ScalarVector<F>,
        edge: &ScalarVector<F>,
        graph: &ProteinGraph,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> ScalarVector<F> {
        let n = x.rows();
        let src = graph.edges.sources();
        let dst = graph.edges.destinations();

        // Per-edge message input: [dst node ; edge ; src node].
        let msg_in = ScalarVector {
            s: Tensor::concat_cols(&[x.s.gather_rows(&dst), edge.s.clone(), x.s.gather_rows(&src)]),
            v: [0, 1, 2].map(|p| {
                Tensor::concat_cols(&[
                    x.v[p].gather_rows(&dst),
                    edge.v[p].clone(),
                    x.v[p].gather_rows(&src),
                ])
            }),
        };
        let msg = run_stack(&self.message, msg_in);

        // Mean over in-edges; nodes without edges keep a zero message.
        let inv_deg: Array2<F> = {
            let deg = graph.in_degrees();
            Array2::from_shape_fn((n, 1), |(i, _)| {
                if deg[i] > 0 {
                    F::of_f64(1.0 / deg[i] as f64)
                } else {
                    F::zero()
                }
            })
        };
        let inv_deg = Tensor::constant(inv_deg);
        let agg_s = msg.s.scatter_sum_rows(&dst, n).rows_scale(&inv_deg);
        let agg_v: [Tensor<F>; 3] =
            [0, 1, 2].map(|p| msg.v[p].scatter_sum_rows(&dst, n).rows_scale(&inv_deg));

        let agg_s = dropout(&agg_s, self.dropout_p, rng.as_deref_mut());
        let agg_v = dropout_vec(&agg_v, self.dropout_p, rng.as_deref_mut());

        let s = self.ln_msg.forward(&x.s.add(&agg_s));
        let v = vector_norm(&[
            x.v[0].add(&agg_v[0]),
            x.v[1].add(&agg_v[1]),
            x.v[2].add(&agg_v[2]),
        ]);

        // Pointwise feed-forward with residual.
        let ff = run_stack(
            &self.ff,
            ScalarVector {
                s: s.clone(),
                v: v.clone(),
            },
        );
        let ff_s = dropout(&ff.s, self.dropout_p, rng.as_deref_mut());
        let ff_v = dropout_vec(&ff.v, self.dropout_p, rng);
        let s = self.ln_ff.forward(&s.add(&ff_s));
        let v = vector_norm(&[v[0].add(&ff_v[0]), v[1].add(&ff_v[1]), v[2].add(&ff_v[2])]);
        ScalarVector { s, v }
    }
}

/// The full structural encoder: input embedding GVPs for nodes and edges,
/// a stack of graph convolutions, and an invariant readout that projects
/// vector channels through each residue's local frame before a final
/// linear map to `out_dim`.
pub struct StructuralEncoder<F: Scalar> {
    pub cfg: GvpConfig,
    node_embed: Vec<GvpLayer<F>>,
    edge_embed: Vec<GvpLayer<F>>,
    convs: Vec<GvpConvLayer<F>>,
    readout: Linear<F>,
}

/// Parameter name prefix for every structural-encoder weight.
pub const PSM_PREFIX: &str = "psm";

impl<F: Scalar> StructuralEncoder<F> {
    pub fn new(store: &mut ParamStore<F>, cfg: GvpConfig) -> Self {
        let (hs, hv) = (cfg.hidden_scalars, cfg.hidden_vectors);
        let node_embed = gvp_stack(
            store,
            &format!("{PSM_PREFIX}.node_embed"),
            1,
            cfg.node_scalar_in,
            cfg.node_vector_in,
            hs,
            hv,
        );
        let edge_embed = gvp_stack(
            store,
            &format!("{PSM_PREFIX}.edge_embed"),
            1,
            cfg.edge_scalar_in,
            cfg.edge_vector_in,
            cfg.edge_hidden_scalars,
            cfg.edge_hidden_vectors,
        );
        let convs = (0..cfg.layers)
            .map(|l| GvpConvLayer::new(store, &format!("{PSM_PREFIX}.conv{l}"), &cfg))
            .collect();
        let readout = Linear::new(
            store,
            &format!("{PSM_PREFIX}.readout"),
            hs + 3 * hv,
            cfg.out_dim,
            Init::UniformFanIn,
            true,
        );
        StructuralEncoder {
            cfg,
            node_embed,
            edge_embed,
            convs,
            readout,
        }
    }

    /// Run the convolution stack, returning the pre-readout features of
    /// every layer (index 0 is the embedded input). Vector channels here
    /// are still equivariant; the property tests check exactly these.
    pub fn forward_layers(
        &self,
        graph: &ProteinGraph,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<ScalarVector<F>> {
        let node_in = ScalarVector {
            s: Tensor::constant(cast_array(&graph.node_scalars)),
            v: [0, 1, 2].map(|p| Tensor::constant(cast_array(&graph.node_vectors[p]))),
        };
        let edge_in = ScalarVector {
            s: Tensor::constant(cast_array(&graph.edge_scalars)),
            v: [0, 1, 2].map(|p| Tensor::constant(cast_array(&graph.edge_vectors[p]))),
        };
        let node = run_stack(&self.node_embed, node_in);
        let edge = run_stack(&self.edge_embed, edge_in);
        let mut out = vec![node];
        for conv in &self.convs {
            let next = conv.forward(out.last().unwrap(), &edge, graph, rng.as_deref_mut());
            out.push(next);
        }
        out
    }

    /// Invariant readout: project each vector channel into the residue's
    /// local frame, concatenate with scalars, and map to `out_dim`.
    pub fn readout(&self, sv: &ScalarVector<F>, graph: &ProteinGraph) -> Tensor<F> {
        let n = sv.rows();
        // Per-node frame coefficients as constant n x 1 columns.
        let coef = |row: usize, col: usize| -> Tensor<F> {
            let c = Array2::from_shape_fn((n, 1), |(i, _)| match &graph.frames[i] {
                Some(f) => F::of_f64(f.axes[row][col]),
                None => F::zero(),
            });
            Tensor::constant(c)
        };
        let mut parts = vec![sv.s.clone()];
        for col in 0..3 {
            let proj = sv.v[0]
                .rows_scale(&coef(0, col))
                .add(&sv.v[1].rows_scale(&coef(1, col)))
                .add(&sv.v[2].rows_scale(&coef(2, col)));
            parts.push(proj);
        }
        self.readout.forward(&Tensor::concat_cols(&parts))
    }

    /// Full encode: backbone graph to invariant `n x out_dim` features.
    pub fn encode(&self, graph: &ProteinGraph, rng: Option<&mut ChaCha8Rng>) -> Tensor<F> {
        let layers = self.forward_layers(graph, rng);
        self.readout(layers.last().unwrap(), graph)
    }
}
