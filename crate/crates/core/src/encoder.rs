//! Composition graph encoder: per-element and per-edge embeddings, a stack
//! of edge/node message-passing rounds, then sum pooling over elements.
//!
//! Node input is the element feature with its composition fraction appended.
//! Edge input for the ordered pair `(i, j)` is `node_input_i || node_input_j`.
//! Each round updates edges from `(e_i, e_j, a_ij)` and nodes from
//! `(e_i, Σ_j a_ij)`; self-pairs are never edges.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chemio::CompositionGraph;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tape::{Mat, NodeId, ParamStore, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Raw element feature length, before the fraction is appended.
    pub feature_dim: usize,
    /// Hidden width `D`.
    pub hidden: usize,
    /// Message-passing rounds `L'`.
    pub layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: crate::chemio::DEFAULT_FEATURE_DIM,
            hidden: 256,
            layers: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub node_encoder: Mlp,
    pub edge_encoder: Mlp,
    pub edge_updaters: Vec<Mlp>,
    pub node_updaters: Vec<Mlp>,
}

/// Pooled material representation `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialRep(pub Vec<f64>);

impl MaterialRep {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Flattened batch of graphs ready for message passing.
struct GraphBatch {
    node_inputs: Mat,
    src: Vec<usize>,
    dst: Vec<usize>,
    node_graph: Vec<usize>,
    n_graphs: usize,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("encoder needs at least one message-passing layer".into()));
        }
        if config.hidden == 0 || config.feature_dim == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        let d = config.hidden;
        let f = config.feature_dim + 1;
        let node_encoder = Mlp::new(store, &format!("{name}.node_encoder"), f, d, d, rng);
        let edge_encoder = Mlp::new(store, &format!("{name}.edge_encoder"), 2 * f, d, d, rng);
        let mut edge_updaters = Vec::new();
        let mut node_updaters = Vec::new();
        for l in 0..config.layers {
            edge_updaters.push(Mlp::new(store, &format!("{name}.edge_update.{l}"), 3 * d, d, d, rng));
            node_updaters.push(Mlp::new(store, &format!("{name}.node_update.{l}"), 2 * d, d, d, rng));
        }
        Ok(EncoderParams {
            config,
            node_encoder,
            edge_encoder,
            edge_updaters,
            node_updaters,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn batch(&self, graphs: &[&CompositionGraph]) -> Result<GraphBatch> {
        let f = self.config.feature_dim;
        let n_nodes: usize = graphs.iter().map(|g| g.n_nodes()).sum();
        let mut node_inputs = Array2::zeros((n_nodes, f + 1));
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut node_graph = Vec::with_capacity(n_nodes);
        let mut offset = 0;
        for (k, g) in graphs.iter().enumerate() {
            if g.n_nodes() == 0 {
                return Err(Error::Empty("composition graph with no elements"));
            }
            for (i, feat) in g.features.iter().enumerate() {
                if feat.len() != f {
                    return Err(Error::dims(format!("node features of graph {k}"), f, feat.len()));
                }
                let mut row = node_inputs.row_mut(offset + i);
                for (c, x) in feat.iter().enumerate() {
                    row[c] = *x;
                }
                row[f] = g.fractions[i];
                node_graph.push(k);
            }
            for (i, j) in g.edges() {
                src.push(offset + i);
                dst.push(offset + j);
            }
            offset += g.n_nodes();
        }
        Ok(GraphBatch {
            node_inputs,
            src,
            dst,
            node_graph,
            n_graphs: graphs.len(),
        })
    }

    /// Encode a batch on the tape; returns a `graphs.len() × D` node.
    pub fn forward(&self, t: &mut Tape, graphs: &[&CompositionGraph]) -> Result<NodeId> {
        Ok(self.forward_trace(t, graphs)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns the node-state node
    /// after the encoder and after every round.
    pub fn forward_trace(&self, t: &mut Tape, graphs: &[&CompositionGraph]) -> Result<(NodeId, Vec<NodeId>)> {
        let b = self.batch(graphs)?;
        let n_nodes = b.node_inputs.nrows();
        let x = t.constant(b.node_inputs);
        let mut e = self.node_encoder.forward(t, x);
        let xs = t.gather(x, b.src.clone());
        let xd = t.gather(x, b.dst.clone());
        let pair = t.concat(&[xs, xd]);
        let mut a = self.edge_encoder.forward(t, pair);
        let mut states = vec![e];
        for (edge_mlp, node_mlp) in self.edge_updaters.iter().zip(&self.node_updaters) {
            let es = t.gather(e, b.src.clone());
            let ed = t.gather(e, b.dst.clone());
            let edge_in = t.concat(&[es, ed, a]);
            a = edge_mlp.forward(t, edge_in);
            let agg = t.scatter_add(a, b.src.clone(), n_nodes);
            let node_in = t.concat(&[e, agg]);
            e = node_mlp.forward(t, node_in);
            states.push(e);
        }
        let g = t.scatter_add(e, b.node_graph, b.n_graphs);
        Ok((g, states))
    }
}

pub fn encode(store: &ParamStore, params: &EncoderParams, graph: &CompositionGraph) -> Result<MaterialRep> {
    Ok(encode_batch(store, params, &[graph])?
        .pop()
        .expect("one graph in, one rep out"))
}

pub fn encode_batch(
    store: &ParamStore,
    params: &EncoderParams,
    graphs: &[&CompositionGraph],
) -> Result<Vec<MaterialRep>> {
    if graphs.is_empty() {
        return Ok(Vec::new());
    }
    let mut t = Tape::new(store);
    let g = params.forward(&mut t, graphs)?;
    Ok(t.value(g).rows().into_iter().map(|r| MaterialRep(r.to_vec())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemio::{build_graph, fallback_element_features, parse_formula};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, hidden: usize, layers: usize) -> (ParamStore, EncoderParams) {
        let mut s = ParamStore::new();
        let p = EncoderParams::new(
            &mut s,
            "enc",
            EncoderConfig {
                feature_dim: dim,
                hidden,
                layers,
            },
            &mut ChaCha8Rng::seed_from_u64(11),
        )
        .unwrap();
        (s, p)
    }

    #[test]
    fn single_node_graph() {
        let (s, p) = setup(4, 6, 2);
        let feats = fallback_element_features(4, 0);
        let g = build_graph(&parse_formula("O").unwrap(), &feats).unwrap();
        let rep = encode(&s, &p, &g).unwrap();
        assert_eq!(rep.0.len(), 6);
        // with no edges the aggregated message is zero; replicate the node path by hand
        let mut t = Tape::new(&s);
        let (_, states) = p.forward_trace(&mut t, &[&g]).unwrap();
        let last = t.value(*states.last().unwrap());
        assert_eq!(last.row(0).to_vec(), rep.0);
    }

    #[test]
    fn permutation_invariance() {
        let (s, p) = setup(5, 8, 3);
        let feats = fallback_element_features(5, 1);
        for f in ["SiO2", "LiFePO4", "BaTiO3"] {
            let g = build_graph(&parse_formula(f).unwrap(), &feats).unwrap();
            let n = g.n_nodes();
            let perm: Vec<usize> = (0..n).rev().collect();
            let a = encode(&s, &p, &g).unwrap();
            let b = encode(&s, &p, &g.permuted(&perm)).unwrap();
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_matches_loop() {
        let (s, p) = setup(5, 8, 3);
        let feats = fallback_element_features(5, 1);
        let graphs: Vec<_> = ["SiO2", "O", "LiFePO4", "La0.7Sr0.3MnO3"]
            .iter()
            .map(|f| build_graph(&parse_formula(f).unwrap(), &feats).unwrap())
            .collect();
        let refs: Vec<&CompositionGraph> = graphs.iter().collect();
        let batch = encode_batch(&s, &p, &refs).unwrap();
        for (g, b) in graphs.iter().zip(&batch) {
            let one = encode(&s, &p, g).unwrap();
            for (x, y) in one.0.iter().zip(&b.0) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
        assert_eq!(encode_batch(&s, &p, &refs[..1]).unwrap()[0], encode(&s, &p, &graphs[0]).unwrap());
        assert!(encode_batch(&s, &p, &[]).unwrap().is_empty());
    }

    #[test]
    fn depth_matches_layer_count() {
        let (s, p) = setup(3, 4, 3);
        assert_eq!(p.edge_updaters.len(), 3);
        assert_eq!(p.node_updaters.len(), 3);
        let feats = fallback_element_features(3, 0);
        let g = build_graph(&parse_formula("SiO2").unwrap(), &feats).unwrap();
        let mut t = Tape::new(&s);
        let (_, states) = p.forward_trace(&mut t, &[&g]).unwrap();
        assert_eq!(states.len(), 4);
    }

    #[test]
    fn dimension_mismatch_names_tensor() {
        let (s, p) = setup(3, 4, 1);
        let feats = fallback_element_features(5, 0);
        let g = build_graph(&parse_formula("SiO2").unwrap(), &feats).unwrap();
        let err = encode(&s, &p, &g).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { ref tensor, expected: 3, got: 5 } if tensor.contains("node features")));
        assert!(EncoderParams::new(
            &mut ParamStore::new(),
            "x",
            EncoderConfig { feature_dim: 3, hidden: 4, layers: 0 },
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .is_err());
    }

    fn relu(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x.max(0.0)).collect()
    }

    /// `x W + b`, with `W` given as rows of the input dimension.
    fn affine(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
        (0..w.ncols())
            .map(|c| b[[0, c]] + x.iter().enumerate().map(|(r, xi)| xi * w[[r, c]]).sum::<f64>())
            .collect()
    }

    fn mlp(s: &ParamStore, m: &Mlp, x: &[f64]) -> Vec<f64> {
        let h = relu(&affine(x, s.get(m.hidden.weight), s.get(m.hidden.bias)));
        affine(&h, s.get(m.out.weight), s.get(m.out.bias))
    }

    #[test]
    fn hand_trace_two_nodes_one_layer() {
        // D = 2, L' = 1, feature dim 1; every MLP set to pass through the
        // first two (or summed) inputs so the recursion can be traced by hand.
        let (mut s, p) = setup(1, 2, 1);
        let set = |s: &mut ParamStore, m: &Mlp, w1: Mat, w2: Mat| {
            *s.get_mut(m.hidden.weight) = w1;
            s.get_mut(m.hidden.bias).fill(0.0);
            *s.get_mut(m.out.weight) = w2;
            s.get_mut(m.out.bias).fill(0.0);
        };
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        // node encoder: input (feat, frac) -> identity
        set(&mut s, &p.node_encoder, eye.clone(), eye.clone());
        // edge encoder: (feat_i, frac_i, feat_j, frac_j) -> (feat_i + feat_j, frac_i * 0 + frac_j)
        set(
            &mut s,
            &p.edge_encoder,
            array![[1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            eye.clone(),
        );
        // edge update: (e_i, e_j, a) -> e_j + a
        set(
            &mut s,
            &p.edge_updaters[0],
            array![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
            eye.clone(),
        );
        // node update: (e_i, m_i) -> e_i + m_i
        set(
            &mut s,
            &p.node_updaters[0],
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]],
            eye.clone(),
        );
        let g = CompositionGraph {
            elements: vec!["O", "Si"],
            features: vec![vec![0.5], vec![2.0]],
            fractions: vec![2.0 / 3.0, 1.0 / 3.0],
        };
        // node 0: e0 = (0.5, 2/3); node 1: e0 = (2, 1/3)
        // a01 = (2.5, 1/3), a10 = (2.5, 2/3)
        // a01' = e1 + a01 = (4.5, 2/3); a10' = e0 + a10 = (3.0, 4/3)
        // e0' = (0.5 + 4.5, 2/3 + 2/3) = (5.0, 4/3); e1' = (2 + 3, 1/3 + 4/3) = (5.0, 5/3)
        // g = (10.0, 3.0)
        let rep = encode(&s, &p, &g).unwrap();
        assert!((rep.0[0] - 10.0).abs() < 1e-12);
        assert!((rep.0[1] - 3.0).abs() < 1e-12);

        // the same recursion with independent scalar loops and random weights
        let (s2, p2) = setup(1, 2, 1);
        let inputs: Vec<Vec<f64>> = g
            .features
            .iter()
            .zip(&g.fractions)
            .map(|(f, x)| vec![f[0], *x])
            .collect();
        let e0: Vec<Vec<f64>> = inputs.iter().map(|x| mlp(&s2, &p2.node_encoder, x)).collect();
        let pair = |i: usize, j: usize| [inputs[i].clone(), inputs[j].clone()].concat();
        let a01 = mlp(&s2, &p2.edge_encoder, &pair(0, 1));
        let a10 = mlp(&s2, &p2.edge_encoder, &pair(1, 0));
        let a01n = mlp(&s2, &p2.edge_updaters[0], &[e0[0].clone(), e0[1].clone(), a01].concat());
        let a10n = mlp(&s2, &p2.edge_updaters[0], &[e0[1].clone(), e0[0].clone(), a10].concat());
        let e0n = mlp(&s2, &p2.node_updaters[0], &[e0[0].clone(), a01n].concat());
        let e1n = mlp(&s2, &p2.node_updaters[0], &[e0[1].clone(), a10n].concat());
        let expected: Vec<f64> = e0n.iter().zip(&e1n).map(|(a, b)| a + b).collect();
        let rep2 = encode(&s2, &p2, &g).unwrap();
        for (x, y) in rep2.0.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
