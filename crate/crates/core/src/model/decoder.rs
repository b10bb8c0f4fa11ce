//! Prefix language model over `[visual tokens][PROMPT][BOS][y_1..y_K]`.
//!
//! Visual and prompt positions attend to each other freely; every text
//! position sees the whole prefix and the text before it.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{init_block, init_layer_norm, init_linear, Graph};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synth::ALPHABET;
use crate::tensor::{AttnShape, Mask, Tensor, TensorError, Var};

pub const BOS: usize = 36;
pub const EOS: usize = 37;
pub const PAD: usize = 38;
pub const PROMPT: usize = 39;
pub const VOCAB_SIZE: usize = 40;

/// Character ids: the plate alphabet in order, then the four specials.
pub struct Vocab;

impl Vocab {
    pub fn id(c: char) -> Result<usize> {
        ALPHABET
            .chars()
            .position(|a| a == c)
            .ok_or(Error::InvalidChar(c))
    }

    /// `None` for special tokens.
    pub fn char(id: usize) -> Option<char> {
        ALPHABET.chars().nth(id)
    }

    pub fn encode(label: &str) -> Result<Vec<usize>> {
        label.chars().map(Self::id).collect()
    }

    pub fn is_special(id: usize) -> bool {
        id >= ALPHABET.len()
    }
}

pub fn init_decoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let d = cfg.model_dim;
    store.insert("dec.tok", Tensor::randn(&[VOCAB_SIZE, d], 0.02, rng));
    store.insert("dec.pos", Tensor::randn(&[cfg.plate_len + 2, d], 0.02, rng));
    for l in 0..cfg.decoder_layers {
        init_block(store, &format!("dec.{l}"), d, cfg.mlp_ratio, rng);
    }
    init_layer_norm(store, "dec.ln_f", d);
    init_linear(store, "dec.head", d, VOCAB_SIZE, 0.02, rng);
}

/// Runs the decoder on `batch` sequences sharing the text length `text.len()
/// / batch`, then returns logits for the last `predict` positions of each.
fn run(
    g: &mut Graph,
    cfg: &ModelConfig,
    h_prime: Var,
    text: &[usize],
    batch: usize,
    predict: usize,
) -> Result<Var> {
    let n = cfg.tokens();
    if g.value(h_prime).rows() != batch * n {
        return Err(TensorError::Shape {
            op: "decoder",
            lhs: g.value(h_prime).shape().to_vec(),
            rhs: vec![batch * n, cfg.model_dim],
        }
        .into());
    }
    let t_text = text.len() / batch;
    let t = n + t_text;
    let tok = g.param("dec.tok")?;
    let pos = g.param("dec.pos")?;
    let emb = g.tape.embedding(tok, text)?;
    let positions: Vec<usize> = (0..text.len()).map(|i| i % t_text).collect();
    let pe = g.tape.embedding(pos, &positions)?;
    let text_x = g.tape.add(emb, pe)?;
    let mut index = Vec::with_capacity(batch * t);
    for b in 0..batch {
        index.extend((0..n).map(|i| (0, b * n + i)));
        index.extend((0..t_text).map(|j| (1, b * t_text + j)));
    }
    let mut x = g.tape.gather_rows(&[h_prime, text_x], &index)?;
    let shape = AttnShape {
        batch,
        tq: t,
        tk: t,
        heads: cfg.heads,
        mask: Mask::PrefixCausal(n + 1),
    };
    for l in 0..cfg.decoder_layers {
        x = g.block(&format!("dec.{l}"), x, shape)?;
    }
    let rows: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| (t - predict..t).map(move |i| (0, b * t + i)))
        .collect();
    let x = g.tape.gather_rows(&[x], &rows)?;
    let x = g.layer_norm("dec.ln_f", x)?;
    g.linear("dec.head", x)
}

/// Logits `[B·(K+1) × V]`: row `k` of each image predicts `y_{k+1}`, the
/// last row predicts EOS.
pub fn forward_teacher_forced(
    g: &mut Graph,
    cfg: &ModelConfig,
    h_prime: Var,
    labels: &[Vec<usize>],
) -> Result<Var> {
    let k = cfg.plate_len;
    let mut text = Vec::with_capacity(labels.len() * (k + 2));
    for y in labels {
        if y.len() != k {
            return Err(TensorError::Contract(format!(
                "label has {} characters, expected {k}",
                y.len()
            ))
            .into());
        }
        text.push(PROMPT);
        text.push(BOS);
        text.extend_from_slice(y);
    }
    run(g, cfg, h_prime, &text, labels.len(), k + 1)
}

/// Next-token targets matching [`forward_teacher_forced`]. With
/// `include_eos = false` the EOS row is ignored by the loss.
pub fn targets(labels: &[Vec<usize>], include_eos: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for y in labels {
        out.extend_from_slice(y);
        out.push(if include_eos { EOS } else { PAD });
    }
    out
}

/// Mean next-token NLL over the non-ignored rows.
pub fn loss(g: &mut Graph, logits: Var, labels: &[Vec<usize>], include_eos: bool) -> Result<Var> {
    Ok(g.tape
        .cross_entropy(logits, &targets(labels, include_eos), PAD)?)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of a batch. Each image stops at its first EOS or after
/// `K` characters; special tokens are dropped from the output.
pub fn generate_greedy(
    g: &mut Graph,
    cfg: &ModelConfig,
    h_prime: Var,
    batch: usize,
) -> Result<Vec<String>> {
    let k = cfg.plate_len;
    let mut seqs: Vec<Vec<usize>> = vec![vec![PROMPT, BOS]; batch];
    let mut done = vec![false; batch];
    let mut out = vec![String::new(); batch];
    for _ in 0..k {
        if done.iter().all(|&d| d) {
            break;
        }
        let text: Vec<usize> = seqs.iter().flatten().copied().collect();
        let logits = run(g, cfg, h_prime, &text, batch, 1)?;
        let lv = g.value(logits).clone();
        for b in 0..batch {
            let next = argmax(lv.row(b));
            seqs[b].push(next);
            if done[b] {
                continue;
            }
            if next == EOS {
                done[b] = true;
            } else if let Some(c) = Vocab::char(next) {
                out[b].push(c);
            }
        }
    }
    Ok(out)
}

/// Log-probability of each label step obtained by feeding prefixes one at a
/// time, without teacher forcing the whole label in one pass.
pub fn stepwise_log_probs(
    g: &mut Graph,
    cfg: &ModelConfig,
    h_prime: Var,
    label: &[usize],
    include_eos: bool,
) -> Result<Vec<f64>> {
    let mut text = vec![PROMPT, BOS];
    let mut out = Vec::new();
    let steps: Vec<usize> = label
        .iter()
        .copied()
        .chain(include_eos.then_some(EOS))
        .collect();
    for &y in &steps {
        let logits = run(g, cfg, h_prime, &text, 1, 1)?;
        let row = g.value(logits).row(0).to_vec();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.push(row[y] - lse);
        text.push(y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn setup() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new();
        init_decoder(&mut store, &cfg, &mut derive_rng(3, 1));
        // larger head so the tests see a non-trivial distribution
        let head = Tensor::randn(&[VOCAB_SIZE, 64], 0.5, &mut derive_rng(3, 2));
        *store.get_mut("dec.head.W").unwrap() = head;
        (cfg, store)
    }

    fn visual(seed: u64) -> Tensor {
        Tensor::randn(&[48, 64], 1.0, &mut derive_rng(seed, 9))
    }

    #[test]
    fn vocab_layout() {
        assert_eq!(Vocab::id('A').unwrap(), 0);
        assert_eq!(Vocab::id('Z').unwrap(), 25);
        assert_eq!(Vocab::id('0').unwrap(), 26);
        assert_eq!(Vocab::id('9').unwrap(), 35);
        assert!(Vocab::id('-').is_err());
        for id in 0..36 {
            assert_eq!(Vocab::id(Vocab::char(id).unwrap()).unwrap(), id);
        }
        for s in [BOS, EOS, PAD, PROMPT] {
            assert!(Vocab::is_special(s) && Vocab::char(s).is_none());
        }
    }

    fn logits_for(store: &ParamStore, cfg: &ModelConfig, h: &Tensor, label: &[usize]) -> Tensor {
        let mut g = Graph::frozen(store, 0.0);
        let hv = g.constant(h.clone());
        let l = forward_teacher_forced(&mut g, cfg, hv, &[label.to_vec()]).unwrap();
        g.value(l).clone()
    }

    #[test]
    fn causality_under_label_perturbation() {
        let (cfg, store) = setup();
        let h = visual(1);
        let y = Vocab::encode("AB12345").unwrap();
        let base = logits_for(&store, &cfg, &h, &y);
        assert_eq!(base.shape(), [8, VOCAB_SIZE]);
        for j in 0..7 {
            let mut y2 = y.clone();
            y2[j] = (y2[j] + 5) % 36;
            let pert = logits_for(&store, &cfg, &h, &y2);
            // row r predicts y_{r+1} and has seen y_1..y_r
            for r in 0..8 {
                let same = base.row(r) == pert.row(r);
                assert_eq!(same, r <= j, "changing y_{} affected row {r}", j + 1);
            }
        }
    }

    #[test]
    fn every_text_row_sees_the_visual_prefix() {
        let (cfg, store) = setup();
        let h = visual(2);
        let y = Vocab::encode("ZZ00XK9").unwrap();
        let base = logits_for(&store, &cfg, &h, &y);
        let mut h2 = h.clone();
        h2.data_mut()[47 * 64 + 3] += 0.5;
        let pert = logits_for(&store, &cfg, &h2, &y);
        for r in 0..8 {
            assert_ne!(base.row(r), pert.row(r));
        }
    }

    #[test]
    fn loss_decomposes_per_position() {
        let (cfg, store) = setup();
        let y = Vocab::encode("QW3RTY7").unwrap();
        let mut g = Graph::frozen(&store, 0.0);
        let hv = g.constant(visual(3));
        let logits = forward_teacher_forced(&mut g, &cfg, hv, std::slice::from_ref(&y)).unwrap();
        let l = loss(&mut g, logits, std::slice::from_ref(&y), true).unwrap();
        let lv = g.value(logits).clone();
        let tg = targets(&[y], true);
        let mut total = 0.0;
        for r in 0..8 {
            let row = lv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[tg[r]];
        }
        assert!((g.value(l).data()[0] - total / 8.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let (cfg, mut store) = setup();
        *store.get_mut("dec.head.W").unwrap() = Tensor::zeros(&[VOCAB_SIZE, 64]);
        let y = Vocab::encode("AAAAAAA").unwrap();
        let mut g = Graph::frozen(&store, 0.0);
        let hv = g.constant(visual(4));
        let logits = forward_teacher_forced(&mut g, &cfg, hv, std::slice::from_ref(&y)).unwrap();
        let l = loss(&mut g, logits, &[y], true).unwrap();
        assert!((g.value(l).data()[0] - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn teacher_forcing_matches_stepwise_prefixes() {
        let (cfg, store) = setup();
        let y = Vocab::encode("K7X2M9P").unwrap();
        for include_eos in [true, false] {
            let mut g = Graph::frozen(&store, 0.0);
            let hv = g.constant(visual(5));
            let logits =
                forward_teacher_forced(&mut g, &cfg, hv, std::slice::from_ref(&y)).unwrap();
            let l = loss(&mut g, logits, std::slice::from_ref(&y), include_eos).unwrap();
            let steps = stepwise_log_probs(&mut g, &cfg, hv, &y, include_eos).unwrap();
            let nll = -steps.iter().sum::<f64>() / steps.len() as f64;
            assert!((g.value(l).data()[0] - nll).abs() < 1e-12, "{include_eos}");
        }
    }

    #[test]
    fn swapping_characters_changes_the_loss() {
        let (cfg, store) = setup();
        let a = Vocab::encode("AB12345").unwrap();
        let mut b = a.clone();
        b.swap(0, 4);
        let mut g = Graph::frozen(&store, 0.0);
        let hv = g.constant(visual(6));
        let la = forward_teacher_forced(&mut g, &cfg, hv, std::slice::from_ref(&a)).unwrap();
        let la = loss(&mut g, la, &[a], true).unwrap();
        let lb = forward_teacher_forced(&mut g, &cfg, hv, &[b.clone()]).unwrap();
        let lb = loss(&mut g, lb, &[b], true).unwrap();
        assert_ne!(g.value(la).data()[0], g.value(lb).data()[0]);
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let (cfg, store) = setup();
        let mut g = Graph::frozen(&store, 0.0);
        let h = Tensor::new(
            vec![96, 64],
            [visual(7).into_data(), visual(8).into_data()].concat(),
        )
        .unwrap();
        let hv = g.constant(h);
        let a = generate_greedy(&mut g, &cfg, hv, 2).unwrap();
        let b = generate_greedy(&mut g, &cfg, hv, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.chars().count() <= 7));
    }

    #[test]
    fn wrong_label_length_is_rejected() {
        let (cfg, store) = setup();
        let mut g = Graph::frozen(&store, 0.0);
        let hv = g.constant(visual(9));
        assert!(forward_teacher_forced(&mut g, &cfg, hv, &[vec![0; 6]]).is_err());
    }
}
