//! Greedy decoding over one context, or over two contexts fused per step.

use serde::{Deserialize, Serialize};

use super::fuse;
use crate::adapters::{GenerationContext, Lvlm};
use crate::domain::{AnswerTrace, Token, TokenDistribution, TokenId};
use crate::error::Result;
use crate::exec::Execution;

/// Which prompts produced an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextsUsed {
    /// The plain image and query, no retrieval.
    Plain,
    Coarse,
    Fine,
    /// Coarse and fine prompts fused per step.
    CoarseAndFine,
    /// One prompt carrying both coarse and fine pairs.
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub trace: AnswerTrace,
    pub contexts_used: ContextsUsed,
    pub retrieval_used: bool,
    /// Set when the requested fusion mode fell back to coarse-only.
    #[serde(default)]
    pub degraded: bool,
}

/// Argmax, ties to the lowest token id.
pub fn greedy_step(d: &TokenDistribution) -> TokenId {
    let mut best = 0;
    for (i, p) in d.probs().iter().enumerate() {
        if *p > d.probs()[best] {
            best = i;
        }
    }
    TokenId(best)
}

/// The greedy loop shared by single and joint decoding. `next` yields the
/// distribution to pick from and is called once per step.
fn greedy_loop(
    lvlm: &dyn Lvlm,
    max_tokens: usize,
    mut next: impl FnMut(&[Token]) -> Result<TokenDistribution>,
) -> Result<AnswerTrace> {
    let desc = lvlm.descriptor();
    let mut tokens: Vec<Token> = Vec::new();
    let mut probs = Vec::new();
    for _ in 0..max_tokens.max(1) {
        let dist = next(&tokens)?;
        dist.validate()?;
        let id = greedy_step(&dist);
        if id == desc.eos_token && !tokens.is_empty() {
            break;
        }
        probs.push(dist.prob(id));
        tokens.push(desc.token(id));
        if id == desc.eos_token {
            break;
        }
    }
    AnswerTrace::new(tokens, probs)
}

pub fn decode_single(prompt: &GenerationContext, lvlm: &dyn Lvlm, max_tokens: usize) -> Result<AnswerTrace> {
    greedy_loop(lvlm, max_tokens, |prefix| lvlm.next_distribution(prompt, prefix))
}

/// Both contexts see the same fused-greedy prefix. The recorded probability of
/// each token is its fused probability.
pub fn decode_joint(
    coarse: &GenerationContext,
    fine: &GenerationContext,
    lvlm: &dyn Lvlm,
    alpha: f64,
    max_tokens: usize,
    execution: Execution,
) -> Result<AnswerTrace> {
    super::check_alpha(alpha)?;
    greedy_loop(lvlm, max_tokens, |prefix| {
        let (pc, pf) =
            execution.join(|| lvlm.next_distribution(coarse, prefix), || lvlm.next_distribution(fine, prefix));
        let (pc, pf) = (pc?, pf?);
        pc.validate()?;
        pf.validate()?;
        fuse(&pc, &pf, alpha)
    })
}
