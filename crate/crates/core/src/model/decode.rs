use super::copy::copy_head;
use super::forward::{shift_right, EncoderStack};
use super::{encode, PgcModel, Result};
use crate::prompt::{BOS, EOS};
use crate::tensor::{Graph, NumArray, Var};

/// Distributions at one decoder position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Combined copy attention over source positions.
    pub alpha: Vec<f64>,
    /// Attention from each encoder layer's view.
    pub views: Vec<Vec<f64>>,
    pub p_gen: f64,
    /// Generator distribution over the fixed vocabulary.
    pub p_vocab: Vec<f64>,
    /// Copy distribution over the extended vocabulary.
    pub p_copy: Vec<f64>,
    /// Output distribution over the extended vocabulary.
    pub p_final: Vec<f64>,
}

fn row_of(a: &NumArray, r: usize) -> Vec<f64> {
    a.row(r).to_vec()
}

fn run_decoder(
    model: &PgcModel,
    stack: &EncoderStack,
    inputs: &[usize],
    extended_size: usize,
    rows: impl Iterator<Item = usize>,
) -> Result<Vec<StepOutput>> {
    let mut g = Graph::new(&model.store);
    let memory = g.constant(stack.memory.clone())?;
    let layers: Vec<Var> = stack
        .layers
        .iter()
        .map(|h| g.constant(h.clone()))
        .collect::<std::result::Result<_, _>>()?;
    let s = model.decoder_graph(&mut g, inputs, memory, &stack.key_mask)?;
    let head = copy_head(
        &mut g,
        model,
        s,
        &layers,
        &stack.key_mask,
        &stack.source_ids,
        extended_size,
    )?;
    Ok(rows
        .map(|r| StepOutput {
            alpha: row_of(g.value(head.alpha), r),
            views: head.views.iter().map(|&v| row_of(g.value(v), r)).collect(),
            p_gen: g.value(head.p_gen)[[r, 0]],
            p_vocab: row_of(g.value(head.p_vocab), r),
            p_copy: row_of(g.value(head.p_copy), r),
            p_final: row_of(g.value(head.p_final), r),
        })
        .collect())
}

/// Output distributions for the next token after decoder inputs `prefix`
/// (which normally starts with `<bos>`).
pub fn decode_step(
    model: &PgcModel,
    stack: &EncoderStack,
    prefix: &[usize],
    extended_size: usize,
) -> Result<StepOutput> {
    model.check_target(prefix.len())?;
    let last = prefix.len() - 1;
    let mut out = run_decoder(model, stack, prefix, extended_size, std::iter::once(last))?;
    Ok(out.pop().expect("one row requested"))
}

/// Teacher-forced outputs at every target position.
pub fn teacher_forced_steps(
    model: &PgcModel,
    source_ids: &[usize],
    target_ids: &[usize],
    extended_size: usize,
) -> Result<Vec<StepOutput>> {
    model.check_target(target_ids.len())?;
    let stack = encode(model, source_ids)?;
    run_decoder(
        model,
        &stack,
        &shift_right(target_ids),
        extended_size,
        0..target_ids.len(),
    )
}

/// Lowest index among the maxima.
pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding; returns generated ids without the final `<eos>`.
pub fn greedy_decode(
    model: &PgcModel,
    source_ids: &[usize],
    extended_size: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let stack = encode(model, source_ids)?;
    let max_len = max_len.min(model.config.max_target_len);
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    while out.len() < max_len {
        let step = decode_step(model, &stack, &prefix, extended_size)?;
        let next = argmax(&step.p_final);
        if next == EOS {
            break;
        }
        out.push(next);
        prefix.push(next);
    }
    Ok(out)
}
