use serde::{Deserialize, Serialize};

use super::loss::BatchRow;
use super::TrainError;
use crate::data::InstructionExample;
use crate::tokenizer::{TokenId, TokenizerModel};

/// Turn markers. Each turn is `marker + text + EOS`; the assistant turn is
/// opened by its marker and the response follows directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub system: String,
    pub user: String,
    pub assistant: String,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self {
            system: "<|sys|>".into(),
            user: "<|usr|>".into(),
            assistant: "<|asst|>".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub row: BatchRow,
    /// Length of the (possibly truncated) prompt, including the assistant
    /// marker.
    pub prompt_len: usize,
    /// Response tokens plus the terminal EOS.
    pub response_len: usize,
    pub truncated: bool,
}

impl ChatTemplate {
    /// Prompt ids: BOS, optional system turn, user turn, assistant marker.
    /// The user text is returned separately so it can be shortened.
    fn render_prompt(&self, ex: &InstructionExample, t: &TokenizerModel) -> (Vec<TokenId>, Vec<TokenId>, Vec<TokenId>) {
        let eos = t.eos_id();
        let mut head = vec![t.bos_id()];
        if let Some(sys) = ex.system.as_deref().filter(|s| !s.is_empty()) {
            head.extend(t.encode(&self.system));
            head.extend(t.encode(sys));
            head.push(eos);
        }
        head.extend(t.encode(&self.user));
        let user = t.encode(&ex.prompt);
        let mut tail = vec![eos];
        tail.extend(t.encode(&self.assistant));
        (head, user, tail)
    }

    /// Full prompt ids (no truncation), used at inference time.
    pub fn prompt_ids(&self, ex: &InstructionExample, t: &TokenizerModel) -> Vec<TokenId> {
        let (mut head, user, tail) = self.render_prompt(ex, t);
        head.extend(user);
        head.extend(tail);
        head
    }
}

/// Renders one example as a training row with loss only on the response and
/// its EOS. When the rendered example exceeds `context_len`, user-prompt
/// tokens are dropped from the end of the user text; the response is never
/// cut.
pub fn format_sft_example(
    ex: &InstructionExample,
    t: &TokenizerModel,
    template: &ChatTemplate,
    context_len: usize,
) -> Result<SftExample, TrainError> {
    if ex.response.is_empty() {
        return Err(TrainError::EmptyResponse);
    }
    let (head, mut user, tail) = template.render_prompt(ex, t);
    let mut response = t.encode(&ex.response);
    response.push(t.eos_id());

    let fixed = head.len() + tail.len() + response.len();
    if fixed > context_len {
        return Err(TrainError::ResponseTooLong {
            needed: fixed,
            context_len,
        });
    }
    let truncated = fixed + user.len() > context_len;
    user.truncate(context_len - fixed);

    let mut ids = head;
    ids.extend(user);
    ids.extend(tail);
    let prompt_len = ids.len();
    let response_len = response.len();
    ids.extend(response);

    let n = ids.len();
    let mut target_ids = ids[1..].to_vec();
    target_ids.push(t.pad_id());
    // position p predicts ids[p + 1]; supervise exactly the response tokens
    let loss_mask = (0..n).map(|p| u8::from(p + 1 >= prompt_len && p + 1 < n)).collect();
    Ok(SftExample {
        row: BatchRow {
            input_ids: ids,
            target_ids,
            loss_mask,
        },
        prompt_len,
        response_len,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;

    fn tok() -> TokenizerModel {
        train_bpe("سلام دنیا hello world <|usr|> <|asst|>", 30).unwrap().0
    }

    fn ex(system: Option<&str>, prompt: &str, response: &str) -> InstructionExample {
        InstructionExample {
            system: system.map(String::from),
            prompt: prompt.into(),
            response: response.into(),
            tags: vec![],
        }
    }

    #[test]
    fn mask_covers_response_and_eos() {
        let t = tok();
        let e = ex(None, "hello", "سلام دنیا");
        let out = format_sft_example(&e, &t, &ChatTemplate::default(), 128).unwrap();
        let k = t.encode("سلام دنیا").len();
        let ones = out.row.loss_mask.iter().filter(|&&m| m == 1).count();
        assert_eq!(ones, k + 1);
        assert_eq!(out.response_len, k + 1);
        assert!(!out.truncated);
    }

    #[test]
    fn zeros_cover_the_rendered_prompt() {
        let t = tok();
        let tpl = ChatTemplate::default();
        let e = ex(Some(""), "hello world", "ok");
        let out = format_sft_example(&e, &t, &tpl, 128).unwrap();
        let expected_prompt = tpl.prompt_ids(&e, &t);
        assert_eq!(out.prompt_len, expected_prompt.len());
        assert_eq!(&out.row.input_ids[..out.prompt_len], &expected_prompt[..]);
        let zeros_before = out.row.loss_mask.iter().take_while(|&&m| m == 0).count();
        // position prompt_len-1 predicts the first response token
        assert_eq!(zeros_before, out.prompt_len - 1);
    }

    #[test]
    fn supervised_targets_decode_to_response() {
        let t = tok();
        let e = ex(Some("be brief"), "سلام", "hello دنیا");
        let out = format_sft_example(&e, &t, &ChatTemplate::default(), 128).unwrap();
        let ids: Vec<TokenId> = out
            .row
            .target_ids
            .iter()
            .zip(&out.row.loss_mask)
            .filter(|(_, &m)| m == 1)
            .map(|(&id, _)| id)
            .collect();
        assert_eq!(*ids.last().unwrap(), t.eos_id());
        assert_eq!(t.decode(&ids).unwrap(), "hello دنیا");
    }

    #[test]
    fn long_prompt_is_truncated_not_response() {
        let t = tok();
        let e = ex(None, &"hello world ".repeat(30), "سلام دنیا");
        let full = format_sft_example(&e, &t, &ChatTemplate::default(), 1024).unwrap();
        let out = format_sft_example(&e, &t, &ChatTemplate::default(), 40).unwrap();
        assert!(out.truncated);
        assert_eq!(out.row.input_ids.len(), 40);
        assert_eq!(out.response_len, full.response_len);
        assert_eq!(
            &out.row.input_ids[40 - out.response_len..],
            &full.row.input_ids[full.row.input_ids.len() - full.response_len..]
        );
    }

    #[test]
    fn response_that_cannot_fit_is_an_error() {
        let t = tok();
        let e = ex(None, "hi", &"hello world ".repeat(20));
        assert!(matches!(
            format_sft_example(&e, &t, &ChatTemplate::default(), 16),
            Err(TrainError::ResponseTooLong { .. })
        ));
    }
}
