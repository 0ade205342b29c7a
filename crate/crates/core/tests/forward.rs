//! The encoder against a loop-by-loop reference implementation.

use approx::assert_abs_diff_eq;
use distiller::nn::{EncoderConfig, EncoderModel, HeadKind, ModelInput, ParamSet, Tensor};
use distiller::rng::RngStreams;

type M = Vec<Vec<f64>>;

fn mat(p: &ParamSet, name: &str) -> M {
    let t = p.get(name).unwrap();
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn vec_of(p: &ParamSet, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

fn affine(x: &M, w: &M, b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mu) / (var + 1e-5).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(q: &M, k: &M, v: &M, heads: usize) -> M {
    let t = q.len();
    let w = q[0].len();
    let dh = w / heads;
    let mut out = vec![vec![0.0; w]; t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..t {
                let a = (s[j] - mx).exp() / z;
                for c in cols.clone() {
                    out[i][c] += a * v[j][c];
                }
            }
        }
    }
    out
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn reference(model: &EncoderModel, tokens: &[usize]) -> M {
    let p = &model.params;
    let (tok, pos) = (mat(p, "embed.tok"), mat(p, "embed.pos"));
    let mut x: M = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    for l in 0..model.config.n_layers {
        let n = |s: &str| format!("layer{l}.{s}");
        let q = affine(&x, &mat(p, &n("wq")), &vec_of(p, &n("bq")));
        let k = affine(&x, &mat(p, &n("wk")), &vec_of(p, &n("bk")));
        let v = affine(&x, &mat(p, &n("wv")), &vec_of(p, &n("bv")));
        let a = attention(&q, &k, &v, model.config.n_heads);
        let o = affine(&a, &mat(p, &n("wo")), &vec_of(p, &n("bo")));
        x = layer_norm(&add(&x, &o), &vec_of(p, &n("ln1.g")), &vec_of(p, &n("ln1.b")));
        let f: M = affine(&x, &mat(p, &n("w1")), &vec_of(p, &n("b1")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = affine(&f, &mat(p, &n("w2")), &vec_of(p, &n("b2")));
        x = layer_norm(&add(&x, &f), &vec_of(p, &n("ln2.g")), &vec_of(p, &n("ln2.b")));
    }
    let feats = match model.config.head {
        HeadKind::Tagging => x,
        HeadKind::Classification => {
            let n = x.len() as f64;
            vec![(0..x[0].len()).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n).collect()]
        }
    };
    affine(&feats, &mat(p, "head.w"), &vec_of(p, "head.b"))
}

fn perturbed(mut model: EncoderModel, seed: u64) -> EncoderModel {
    // move biases and gains off their initial values so every term counts
    let mut rng = RngStreams::new(seed).stream("perturb");
    for (_, t) in model.params.iter_mut() {
        let noise = Tensor::randn(t.rows(), t.cols(), 0.1, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    model
}

#[test]
fn batched_forward_matches_reference() {
    for (head, layers) in [(HeadKind::Classification, 1), (HeadKind::Tagging, 2)] {
        let cfg = EncoderConfig::student(layers, 8, 10, 3, head);
        let model = perturbed(EncoderModel::new(cfg, &mut RngStreams::new(4).stream("init")).unwrap(), 5);
        let seqs = [vec![1, 5, 9], vec![0, 2, 2, 7, 3]];
        let batch: Vec<ModelInput> = seqs.iter().map(|s| ModelInput::Tokens(s.clone())).collect();
        let logits = model.predict_logits(&batch).unwrap();
        let expected: M = seqs.iter().flat_map(|s| reference(&model, s)).collect();
        assert_eq!(logits.rows(), expected.len());
        for (r, row) in expected.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert_abs_diff_eq!(logits.get(r, c), *v, epsilon = 1e-10);
            }
        }
    }
}

#[test]
fn one_token_one_layer_by_hand() {
    // with a single position attention returns v, so the block reduces to
    // two residual layer norms that can be written out directly
    let cfg = EncoderConfig {
        n_layers: 1,
        h_units: 2,
        h_mid: 1,
        n_heads: 1,
        vocab_size: 1,
        n_classes: 1,
        head: HeadKind::Classification,
        max_len: 1,
    };
    let mut model = EncoderModel::new(cfg, &mut RngStreams::new(0).stream("init")).unwrap();
    let p = &mut model.params;
    let set = |p: &mut ParamSet, n: &str, r: usize, c: usize, v: &[f64]| p.insert(n, Tensor::matrix(r, c, v.to_vec()));
    set(p, "embed.tok", 1, 2, &[1.0, 3.0]);
    set(p, "embed.pos", 1, 2, &[0.0, 0.0]);
    set(p, "layer0.wv", 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    set(p, "layer0.wo", 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    set(p, "layer0.w1", 2, 1, &[0.0, 0.0]);
    set(p, "layer0.w2", 1, 2, &[0.0, 0.0]);
    set(p, "head.w", 2, 1, &[1.0, -1.0]);
    set(p, "head.b", 1, 1, &[0.5]);
    // x = [1,3]; x + attn = [2,6]; mean 4, variance 4
    let z = 2.0 / (4.0f64 + 1e-5).sqrt();
    // feed-forward adds nothing; second norm of [-z, z]
    let var = z * z;
    let z2 = z / (var + 1e-5).sqrt();
    let expected = -z2 - z2 + 0.5;
    let got = model.predict_logits(&[ModelInput::Tokens(vec![0])]).unwrap();
    assert_abs_diff_eq!(got.item(), expected, epsilon = 1e-12);
}
