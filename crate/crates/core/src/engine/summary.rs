use super::{EngineError, Message};
use crate::schema::SummaryMethod;

/// Longest `truncated_concat` summary, in characters.
pub const SUMMARY_CHAR_LIMIT: usize = 4096;
const SEPARATOR: &str = "\n---\n";

/// Condenses a stage transcript into the next stage's task.
///
/// `last_message` returns the final message's content. `truncated_concat`
/// joins every message's content with `\n---\n` and keeps the first
/// [`SUMMARY_CHAR_LIMIT`] characters.
pub fn summarize(transcript: &[Message], method: SummaryMethod) -> Result<String, EngineError> {
    let last = transcript.last().ok_or(EngineError::EmptyTranscript)?;
    Ok(match method {
        SummaryMethod::LastMessage => last.content.clone(),
        SummaryMethod::TruncatedConcat => {
            let joined = transcript
                .iter()
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .join(SEPARATOR);
            match joined.char_indices().nth(SUMMARY_CHAR_LIMIT) {
                Some((cut, _)) => joined[..cut].to_string(),
                None => joined,
            }
        }
    })
}
