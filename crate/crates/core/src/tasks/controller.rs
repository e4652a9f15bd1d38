//! Token controllers that pick a library program and seed its registers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{rng, uniform, Dense};
use crate::substrate::{concat, ParamId, ParamStore, Tape, Tensor, Var};

use super::data::{Vocab, MAX_NUMBER};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub embed: usize,
    pub hidden: usize,
    /// Dense tanh layers between pooling and the heads; 0 puts the heads on the pooled embedding.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Adds a single-head self-attention layer before pooling.
    #[serde(default)]
    pub attention: bool,
    #[serde(default)]
    pub heads: HeadKind,
    /// Multiplier on register head logits.
    #[serde(default = "default_pointer_scale")]
    pub pointer_scale: f64,
}

/// How register heads produce their Words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// A dense softmax over the `n` values.
    Dense,
    /// Attention over input positions, reading each number token through a
    /// value table shared by all heads. Word tokens read as the uniform Word.
    #[default]
    Pointer,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            embed: 32,
            hidden: 64,
            layers: 2,
            attention: false,
            heads: HeadKind::default(),
            pointer_scale: default_pointer_scale(),
        }
    }
}

fn default_layers() -> usize {
    2
}

fn default_pointer_scale() -> f64 {
    3.0
}

struct Attention {
    q: ParamId,
    k: ParamId,
    v: ParamId,
}

/// Position-specific token embedding, mean pooling, dense tanh layers and
/// one softmax head per output.
pub struct Controller {
    pub store: ParamStore,
    embed: ParamId,
    attention: Option<Attention>,
    layers: Vec<Dense>,
    select: Option<Dense>,
    heads: Vec<(usize, Dense)>,
    /// Number token to value logits, `[MAX_NUMBER, n]`; present for pointer heads.
    values: Option<ParamId>,
    pointer_scale: f64,
    seq_len: usize,
    vocab: usize,
    embed_width: usize,
}

/// What the controller asks of the machine.
pub struct ControllerOutput<'t> {
    /// Distribution over library entry points.
    pub selection: Var<'t>,
    /// Initial Word for each driven register.
    pub registers: Vec<(usize, Var<'t>)>,
}

impl Controller {
    /// `entries` library programs to choose from, one `n`-way head per register in `registers`.
    pub fn new(
        config: &ControllerConfig,
        seq_len: usize,
        entries: usize,
        registers: &[usize],
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.embed == 0 || config.hidden == 0 || seq_len == 0 || entries == 0 {
            return Err(Error::Shape("controller sizes must be positive".into()));
        }
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let vocab = Vocab::size();
        let e = config.embed;
        let embed = store.add("ctrl.embed", uniform(&[seq_len * vocab, e], 0.5, &mut r));
        let attention = config.attention.then(|| {
            let b = (3.0 / e as f64).sqrt();
            Attention {
                q: store.add("ctrl.attn.q", uniform(&[e, e], b, &mut r)),
                k: store.add("ctrl.attn.k", uniform(&[e, e], b, &mut r)),
                v: store.add("ctrl.attn.v", uniform(&[e, e], b, &mut r)),
            }
        });
        let layers: Vec<Dense> = (0..config.layers)
            .map(|i| {
                let inputs = if i == 0 { e } else { config.hidden };
                Dense::new(&mut store, &format!("ctrl.l{}", i + 1), inputs, config.hidden, &mut r)
            })
            .collect();
        let top = if layers.is_empty() { e } else { config.hidden };
        let select = (entries > 1).then(|| Dense::new(&mut store, "ctrl.select", top, entries, &mut r));
        let head_width = match config.heads {
            HeadKind::Dense => n,
            HeadKind::Pointer => seq_len,
        };
        let heads = registers
            .iter()
            .map(|&reg| (reg, Dense::new(&mut store, &format!("ctrl.r{reg}"), top, head_width, &mut r)))
            .collect();
        let values = (config.heads == HeadKind::Pointer)
            .then(|| store.add("ctrl.values", uniform(&[MAX_NUMBER, n], 0.5, &mut r)));
        Ok(Controller {
            store,
            embed,
            attention,
            layers,
            select,
            heads,
            values,
            pointer_scale: config.pointer_scale,
            seq_len,
            vocab,
            embed_width: e,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn forward<'t>(&self, tape: &'t Tape, params: &[Var<'t>], tokens: &[usize]) -> Result<ControllerOutput<'t>> {
        if tokens.len() != self.seq_len {
            return Err(Error::Shape(format!(
                "expected {} tokens, got {}",
                self.seq_len,
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::Range { value: bad, size: self.vocab });
        }
        let ids: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != Vocab::pad())
            .map(|(p, &t)| p * self.vocab + t)
            .collect();
        if ids.is_empty() {
            return Err(Error::Usage("input has no tokens".into()));
        }
        let mut x = params[self.embed.0].gather_rows(&ids);
        if let Some(a) = &self.attention {
            let q = x.contract(params[a.q.0], &[(1, 0)])?;
            let k = x.contract(params[a.k.0], &[(1, 0)])?;
            let v = x.contract(params[a.v.0], &[(1, 0)])?;
            let scores = q.contract(k, &[(1, 1)])?.scale(1.0 / (self.embed_width as f64).sqrt());
            x = x.add(scores.softmax(1).contract(v, &[(1, 0)])?);
        }
        let pool = tape.constant(Tensor::full(&[ids.len()], 1.0 / ids.len() as f64));
        let pooled = pool.contract(x, &[(0, 0)])?;
        let h = self
            .layers
            .iter()
            .fold(pooled, |h, layer| layer.apply(params, h).tanh());
        let selection = match &self.select {
            Some(s) => s.apply(params, h).softmax(0),
            None => tape.constant(Tensor::vector(vec![1.0])),
        };
        let words = self.values.map(|t| {
            let n = params[t.0].shape()[1];
            let table = concat(&[params[t.0], tape.constant(Tensor::zeros(&[1, n]))], 0);
            let rows: Vec<usize> = tokens.iter().map(|&t| Vocab::value(t).unwrap_or(MAX_NUMBER)).collect();
            table.gather_rows(&rows).softmax(1)
        });
        let registers = self
            .heads
            .iter()
            .map(|(reg, d)| {
                let weights = d.apply(params, h).scale(self.pointer_scale).softmax(0);
                let word = match words {
                    Some(w) => weights.contract(w, &[(0, 0)]),
                    None => Ok(weights),
                };
                word.map(|w| (*reg, w))
            })
            .collect::<Result<_>>()?;
        Ok(ControllerOutput { selection, registers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_are_distributions() {
        for (attention, heads) in [(false, HeadKind::Dense), (true, HeadKind::Dense), (false, HeadKind::Pointer)] {
            let cfg = ControllerConfig {
                attention,
                heads,
                ..Default::default()
            };
            let c = Controller::new(&cfg, 4, 3, &[2, 3], 16, 0).unwrap();
            let tape = Tape::new();
            let p = c.store.attach(&tape);
            let toks = Vocab::encode("add 3 and 4").unwrap();
            let out = c.forward(&tape, &p, &toks).unwrap();
            assert!((out.selection.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (_, r) in &out.registers {
                assert_eq!(r.shape(), vec![16]);
                assert!((r.value().data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_entry_selection_is_dirac() {
        let c = Controller::new(&ControllerConfig::default(), 4, 1, &[2], 16, 0).unwrap();
        let tape = Tape::new();
        let p = c.store.attach(&tape);
        let out = c.forward(&tape, &p, &Vocab::encode("add 3 and 4").unwrap()).unwrap();
        assert_eq!(out.selection.to_vec(), vec![1.0]);
    }
}
