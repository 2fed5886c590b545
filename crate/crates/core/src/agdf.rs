//! Audio-guided dynamic fusion.
//!
//! The embedded audio feature queries the embedded audio-visual
//! concatenation through multi-head attention; a sigmoid gate then mixes the
//! attended vector with the audio embedding:
//!
//! ```text
//! q    = audio_embed(f_a)
//! f'   = MHA(q, av_embed([f_a; f_v]))
//! w    = sigmoid(f' . g_av + q . g_a + b)
//! K_f  = w * f' + (1 - w) * q
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Mha, ParamStore};

/// Past about 36.7 the f64 sigmoid rounds to exactly 1; clamping the gate
/// logit keeps the gate strictly inside (0, 1).
pub const GATE_LOGIT_LIMIT: f64 = 36.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgdfConfig {
    /// Encoder feature size.
    pub feature_dim: usize,
    /// Embedding size of the query, context and fused output.
    pub model_dim: usize,
    pub heads: usize,
    /// Attend over two tokens (audio, visual) instead of one embedded
    /// concatenation.
    pub separate_tokens: bool,
    /// One gate value per component instead of a single scalar.
    pub per_component_gate: bool,
}

impl AgdfConfig {
    pub fn new(feature_dim: usize, model_dim: usize, heads: usize) -> Self {
        AgdfConfig {
            feature_dim,
            model_dim,
            heads,
            separate_tokens: false,
            per_component_gate: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Agdf {
    pub config: AgdfConfig,
    pub audio_embed: Linear,
    /// `2d -> d_m` on the concatenation, or `d -> d_m` on the visual
    /// feature alone when tokens are separate.
    pub context_embed: Linear,
    pub attention: Mha,
    pub gate_attended: Linear,
    /// Carries the gate bias.
    pub gate_audio: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct GuidedAttention {
    /// `(B, d_m)`
    pub attended: Var,
    /// Embedded audio query, `(B, d_m)`.
    pub audio_emb: Var,
    /// `(B * heads, 1, n_tokens)`
    pub weights: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AgdfOutput {
    pub fused: Var,
    /// `(B, 1)` or `(B, d_m)` for a per-component gate.
    pub gate: Var,
    pub attended: Var,
    pub audio_emb: Var,
    pub weights: Var,
}

impl Agdf {
    pub fn new(store: &mut ParamStore, name: &str, config: AgdfConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, dm) = (config.feature_dim, config.model_dim);
        let ctx_in = if config.separate_tokens { d } else { 2 * d };
        let gate_out = if config.per_component_gate { dm } else { 1 };
        Ok(Agdf {
            audio_embed: Linear::new(store, &format!("{name}.audio_embed"), d, dm, true, rng),
            context_embed: Linear::new(store, &format!("{name}.context_embed"), ctx_in, dm, true, rng),
            attention: Mha::new(store, &format!("{name}.attention"), dm, config.heads, rng)?,
            gate_attended: Linear::new(store, &format!("{name}.gate_attended"), dm, gate_out, false, rng),
            gate_audio: Linear::new(store, &format!("{name}.gate_audio"), dm, gate_out, true, rng),
            config,
        })
    }

    fn check_rows(&self, g: &Graph<'_>, op: &'static str, x: Var, dim: usize) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != dim {
            return Err(Error::shape(op, format!("expected (B, {dim}), got {s:?}")));
        }
        Ok(s[0])
    }

    /// `f_a`, `f_v`: `(B, d)` encoder features.
    pub fn guided_attention(&self, g: &mut Graph, f_a: Var, f_v: Var) -> Result<GuidedAttention> {
        let d = self.config.feature_dim;
        let dm = self.config.model_dim;
        let b = self.check_rows(g, "guided_attention", f_a, d)?;
        if self.check_rows(g, "guided_attention", f_v, d)? != b {
            return Err(Error::shape("guided_attention", "audio and visual batch sizes differ"));
        }
        let audio_emb = self.audio_embed.forward(g, f_a)?;
        let query = g.reshape(audio_emb, &[b, 1, dm])?;
        let context = if self.config.separate_tokens {
            let v = self.context_embed.forward(g, f_v)?;
            let v = g.reshape(v, &[b, 1, dm])?;
            g.concat(&[query, v], 1)?
        } else {
            let av = g.concat(&[f_a, f_v], 1)?;
            let ctx = self.context_embed.forward(g, av)?;
            g.reshape(ctx, &[b, 1, dm])?
        };
        let out = self.attention.forward(g, query, context)?;
        let attended = g.reshape(out.out, &[b, dm])?;
        Ok(GuidedAttention {
            attended,
            audio_emb,
            weights: out.weights,
        })
    }

    /// Gate and mix; returns `(K_f, gate)`.
    pub fn gated_fuse(&self, g: &mut Graph, attended: Var, audio_emb: Var) -> Result<(Var, Var)> {
        let dm = self.config.model_dim;
        let b = self.check_rows(g, "gated_fuse", attended, dm)?;
        if self.check_rows(g, "gated_fuse", audio_emb, dm)? != b {
            return Err(Error::shape("gated_fuse", "batch sizes differ"));
        }
        let la = self.gate_attended.forward(g, attended)?;
        let lq = self.gate_audio.forward(g, audio_emb)?;
        let logit = g.add(la, lq)?;
        let logit = g.clamp(logit, -GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT)?;
        let gate = g.sigmoid(logit)?;
        let wide = if self.config.per_component_gate {
            gate
        } else {
            let ones = g.input(Tensor::full([1, dm], 1.0));
            g.matmul(gate, ones)?
        };
        // q + w (f' - q): equals q exactly when f' == q
        let diff = g.sub(attended, audio_emb)?;
        let step = g.mul(wide, diff)?;
        let fused = g.add(audio_emb, step)?;
        Ok((fused, gate))
    }

    pub fn forward(&self, g: &mut Graph, f_a: Var, f_v: Var) -> Result<AgdfOutput> {
        let ga = self.guided_attention(g, f_a, f_v)?;
        let (fused, gate) = self.gated_fuse(g, ga.attended, ga.audio_emb)?;
        Ok(AgdfOutput {
            fused,
            gate,
            attended: ga.attended,
            audio_emb: ga.audio_emb,
            weights: ga.weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::GradCheckConfig;
    use crate::nn::{check_store_gradients, module_rng, ParamId};

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn fixture(config: AgdfConfig, seed: u64) -> (ParamStore, Agdf) {
        let mut store = ParamStore::new();
        let agdf = Agdf::new(&mut store, "agdf", config, &mut module_rng(seed, "agdf")).unwrap();
        (store, agdf)
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        store.get_mut(id).data_mut().fill(0.0);
    }

    #[test]
    fn paper_dimensions() {
        let (store, agdf) = fixture(AgdfConfig::new(512, 768, 4), 0);
        let mut rng = module_rng(1, "x");
        let mut g = Graph::inference(&store);
        let fa = g.input(random(&[1, 512], &mut rng));
        let fv = g.input(random(&[1, 512], &mut rng));
        let av = g.concat(&[fa, fv], 1).unwrap();
        assert_eq!(g.shape(av), &[1, 1024]);
        let out = agdf.forward(&mut g, fa, fv).unwrap();
        assert_eq!(g.shape(out.attended), &[1, 768]);
        assert_eq!(g.shape(out.fused), &[1, 768]);
    }

    #[test]
    fn single_context_token_gets_all_the_weight() {
        let (store, agdf) = fixture(AgdfConfig::new(6, 8, 4), 2);
        let mut rng = module_rng(3, "x");
        let fa_t = random(&[3, 6], &mut rng);
        let fv_t = random(&[3, 6], &mut rng);
        let mut g = Graph::inference(&store);
        let fa = g.input(fa_t.clone());
        let fv = g.input(fv_t.clone());
        let ga = agdf.guided_attention(&mut g, fa, fv).unwrap();
        assert!(g.value(ga.weights).data().iter().all(|&w| w == 1.0));

        // out_proj(value_proj(av_embed([f_a; f_v]))), composed by hand
        let av = g.concat(&[fa, fv], 1).unwrap();
        let ctx = agdf.context_embed.forward(&mut g, av).unwrap();
        let v = agdf.attention.value.forward(&mut g, ctx).unwrap();
        let expect = agdf.attention.out.forward(&mut g, v).unwrap();
        for (a, b) in g.value(ga.attended).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_mixes_evenly() {
        let (mut store, agdf) = fixture(AgdfConfig::new(4, 6, 2), 4);
        zero(&mut store, agdf.gate_attended.weight);
        zero(&mut store, agdf.gate_audio.weight);
        let mut rng = module_rng(5, "x");
        let (a, q) = (random(&[2, 6], &mut rng), random(&[2, 6], &mut rng));
        let mut g = Graph::inference(&store);
        let (av, qv) = (g.input(a.clone()), g.input(q.clone()));
        let (fused, gate) = agdf.gated_fuse(&mut g, av, qv).unwrap();
        assert!(g.value(gate).data().iter().all(|&w| w == 0.5));
        for ((k, x), y) in g.value(fused).data().iter().zip(a.data()).zip(q.data()) {
            assert!((k - 0.5 * (x + y)).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_gate_logits_stay_inside_the_open_interval() {
        let (mut store, agdf) = fixture(AgdfConfig::new(4, 6, 2), 4);
        zero(&mut store, agdf.gate_attended.weight);
        zero(&mut store, agdf.gate_audio.weight);
        for bias in [1e3, -1e3] {
            store.get_mut(agdf.gate_audio.bias.unwrap()).data_mut().fill(bias);
            let mut rng = module_rng(5, "x");
            let (a, q) = (random(&[2, 6], &mut rng), random(&[2, 6], &mut rng));
            let mut g = Graph::inference(&store);
            let (av, qv) = (g.input(a), g.input(q));
            let (_, gate) = agdf.gated_fuse(&mut g, av, qv).unwrap();
            assert!(g.value(gate).data().iter().all(|&w| w > 0.0 && w < 1.0));
        }
    }

    #[test]
    fn equal_inputs_are_a_fixed_point() {
        let (store, agdf) = fixture(AgdfConfig::new(4, 6, 2), 6);
        let q = random(&[3, 6], &mut module_rng(7, "x"));
        let mut g = Graph::inference(&store);
        let (a, b) = (g.input(q.clone()), g.input(q.clone()));
        let (fused, _) = agdf.gated_fuse(&mut g, a, b).unwrap();
        assert_eq!(g.value(fused), &q);
    }

    #[test]
    fn fused_value_lies_between_inputs() {
        for per_component_gate in [false, true] {
            let mut config = AgdfConfig::new(4, 6, 2);
            config.per_component_gate = per_component_gate;
            let (store, agdf) = fixture(config, 8);
            let mut rng = module_rng(9, "x");
            for _ in 0..1000 {
                // keeps the logit well below the ~36.7 where sigmoid rounds to 1.0
                let scale = rng.gen_range(0.1..10.0);
                let mut a = random(&[1, 6], &mut rng);
                a.data_mut().iter_mut().for_each(|v| *v *= scale);
                let q = random(&[1, 6], &mut rng);
                let mut g = Graph::inference(&store);
                let (av, qv) = (g.input(a.clone()), g.input(q.clone()));
                let (fused, gate) = agdf.gated_fuse(&mut g, av, qv).unwrap();
                assert!(g.value(gate).data().iter().all(|&w| w > 0.0 && w < 1.0));
                for ((k, x), y) in g.value(fused).data().iter().zip(a.data()).zip(q.data()) {
                    // allow one rounding step at the ends of the interval
                    let slack = 4.0 * f64::EPSILON * x.abs().max(y.abs());
                    assert!(*k >= x.min(*y) - slack && *k <= x.max(*y) + slack);
                }
            }
        }
    }

    #[test]
    fn fused_output_changes_boundedly_with_attended_input() {
        let (store, agdf) = fixture(AgdfConfig::new(4, 6, 2), 10);
        let w_av = store.get(agdf.gate_attended.weight).data();
        let w_norm = w_av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut rng = module_rng(11, "x");
        let eps = 1e-6;
        for _ in 0..200 {
            let a = random(&[1, 6], &mut rng);
            let q = random(&[1, 6], &mut rng);
            let dir = random(&[1, 6], &mut rng);
            let dn = dir.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let shifted: Vec<f64> = a.data().iter().zip(dir.data()).map(|(x, d)| x + eps * d / dn).collect();
            let fuse = |x: Vec<f64>| {
                let mut g = Graph::inference(&store);
                let av = g.input(Tensor::new([1, 6], x).unwrap());
                let qv = g.input(q.clone());
                let (f, _) = agdf.gated_fuse(&mut g, av, qv).unwrap();
                g.value(f).data().to_vec()
            };
            let base = fuse(a.data().to_vec());
            let moved = fuse(shifted);
            let change = base.iter().zip(&moved).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let gap = a.data().iter().zip(q.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let bound = (1.0 + w_norm * gap * 6f64.sqrt()) * eps;
            assert!(change <= bound * (1.0 + 1e-6), "{change} > {bound}");
        }
    }

    #[test]
    fn rejects_wrong_feature_size() {
        let (store, agdf) = fixture(AgdfConfig::new(4, 6, 2), 0);
        let mut g = Graph::inference(&store);
        let fa = g.input(Tensor::zeros([1, 5]));
        let fv = g.input(Tensor::zeros([1, 4]));
        assert!(matches!(agdf.forward(&mut g, fa, fv), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (separate_tokens, per_component_gate) in [(false, false), (true, false), (false, true)] {
            let mut config = AgdfConfig::new(3, 4, 2);
            config.separate_tokens = separate_tokens;
            config.per_component_gate = per_component_gate;
            let (mut store, agdf) = fixture(config, 12);
            let mut rng = module_rng(13, "x");
            let fa = store.add("fa", random(&[2, 3], &mut rng));
            let fv = store.add("fv", random(&[2, 3], &mut rng));
            let report = check_store_gradients(&store, GradCheckConfig::default(), |g| {
                let (a, v) = (g.param(fa), g.param(fv));
                let out = agdf.forward(g, a, v)?;
                let y = g.tanh(out.fused)?;
                g.sum(y)
            })
            .unwrap();
            assert!(report.passed(), "worst {}", report.worst());
        }
    }
}
