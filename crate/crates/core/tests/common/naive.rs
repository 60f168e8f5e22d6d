//! Naive f64 reference for the encoder's attention, written with plain loops
//! and reading weights straight from the container by name.

use attnlens::container::TensorContainer;
use attnlens::ModelConfig;

pub type Matrix = Vec<Vec<f64>>;

pub struct Reference<'a> {
    pub cfg: &'a ModelConfig,
    pub weights: &'a TensorContainer,
}

impl Reference<'_> {
    fn get(&self, name: &str) -> Vec<f64> {
        self.weights.get(name).unwrap().data().iter().map(|&v| v as f64).collect()
    }

    fn rows(&self, name: &str) -> Matrix {
        let t = self.weights.get(name).unwrap();
        let cols = t.shape()[1];
        t.data().chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    // y[i][o] = sum_k x[i][k] * w[o][k] + b[o]
    fn linear(&self, x: &Matrix, prefix: &str) -> Matrix {
        let w = self.rows(&format!("{prefix}.weight"));
        let b = self.get(&format!("{prefix}.bias"));
        let mut y = vec![vec![0.0; w.len()]; x.len()];
        for i in 0..x.len() {
            for o in 0..w.len() {
                let mut acc = b[o];
                for k in 0..x[i].len() {
                    acc += x[i][k] * w[o][k];
                }
                y[i][o] = acc;
            }
        }
        y
    }

    fn layer_norm(&self, x: &mut Matrix, prefix: &str) {
        let g = self.get(&format!("{prefix}.gain"));
        let b = self.get(&format!("{prefix}.bias"));
        for row in x.iter_mut() {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / (var + self.cfg.layer_norm_eps).sqrt() * g[k] + b[k];
            }
        }
    }

    /// Returns attention[l][h][i][j].
    pub fn attention(&self, ids: &[u32]) -> Vec<Vec<Matrix>> {
        let cfg = self.cfg;
        let d = cfg.hidden_size;
        let dh = d / cfg.num_heads;
        let tok = self.rows("embeddings.token.weight");
        let pos = self.rows("embeddings.position.weight");
        let mut x: Matrix = ids
            .iter()
            .enumerate()
            .map(|(p, &id)| (0..d).map(|k| tok[id as usize][k] + pos[p + cfg.position_offset][k]).collect())
            .collect();
        self.layer_norm(&mut x, "embeddings.norm");

        let n = ids.len();
        let mut out = Vec::new();
        for l in 0..cfg.num_layers {
            let p = format!("layers.{l}");
            let q = self.linear(&x, &format!("{p}.attention.query"));
            let k = self.linear(&x, &format!("{p}.attention.key"));
            let v = self.linear(&x, &format!("{p}.attention.value"));
            let mut ctx = vec![vec![0.0; d]; n];
            let mut heads = Vec::new();
            for h in 0..cfg.num_heads {
                let mut probs = vec![vec![0.0; n]; n];
                for i in 0..n {
                    let logits: Vec<f64> = (0..n)
                        .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..n {
                        probs[i][j] = (logits[j] - m).exp() / z;
                    }
                    for c in 0..dh {
                        ctx[i][h * dh + c] = (0..n).map(|j| probs[i][j] * v[j][h * dh + c]).sum();
                    }
                }
                heads.push(probs);
            }
            out.push(heads);

            let attn = self.linear(&ctx, &format!("{p}.attention.output"));
            let mut hidden: Matrix = (0..n).map(|i| (0..d).map(|c| x[i][c] + attn[i][c]).collect()).collect();
            self.layer_norm(&mut hidden, &format!("{p}.attention.norm"));
            let mut inner = self.linear(&hidden, &format!("{p}.ffn.intermediate"));
            for row in inner.iter_mut() {
                for v in row.iter_mut() {
                    *v = 0.5 * *v * (1.0 + statrs::function::erf::erf(*v / 2f64.sqrt()));
                }
            }
            let ffn = self.linear(&inner, &format!("{p}.ffn.output"));
            let mut next: Matrix = (0..n).map(|i| (0..d).map(|c| hidden[i][c] + ffn[i][c]).collect()).collect();
            self.layer_norm(&mut next, &format!("{p}.ffn.norm"));
            x = next;
        }
        out
    }
}
