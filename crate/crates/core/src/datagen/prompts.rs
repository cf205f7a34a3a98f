use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Version;
use crate::error::{Error, Result};

pub const DELIMITER: &str = "####";

/// System message for short Q&A generation. Reproduced verbatim, including
/// its "four keys" wording before a list of ten.
pub const V1_SYSTEM: &str = "You will be provided with a piece of caption that describes a music. \
The cation will be delimited with #### characters.

Your task is to generate five question-answer pairs related to the music caption. \
The question should ask to describe the music content in detail. \
The answer should be the answer to the question and contain details of the provided music caption.

The question can include but not limited to any of the following information when the caption include them: \
music tempo, mood of the music, instruments used, singer, genre, music tags, or any inference, etc.

IMPORTANT: Output a JSON object with the following four keys: 'Question 1', 'Answer 1', \
'Question 2', 'Answer 2', 'Question 3', 'Answer 3', 'Question 4', 'Answer 4', 'Question 5', 'Answer 5'";

/// System message for long Q&A generation, with its sample questions.
pub const V2_SYSTEM: &str = "You will be provided with a piece of caption that describes a music. \
The cation will be delimited with #### characters.

Your task is to generate a conversational question-answer pair related to describing the music in detail. \
The question should ask to describe the music content in general. \
The answer should be a paraphrased and well-structured paragraph based on the provided description, \
with a minimum of 100 words and a maximum of 200 words. \
The answer must be a paraphrased version of the provided information, very detailed and descriptive, \
and within the specified word count.

##SAMPLE QUESTIONS:
- Can you provide a summary of the music?
- What are the main features of the music?
- Could you briefly describe the music content?

IMPORTANT: Output a JSON object with only two keys: \"Q\" for question and \"A\" for answer.";

pub const VERIFY_QUESTION: &str =
    "Does this question-answer pair come from the context delimited with ####?";

pub const VERIFY_SYSTEM: &str = "You will be provided with a music caption delimited with #### characters, \
followed by a question-answer pair.

Does this question-answer pair come from the context delimited with ####? \
Reply with a single word: Yes or No.";

/// Which prompt family generated a pair: v1 yields short pairs, v2 long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVersion {
    V1,
    V2,
}

impl PromptVersion {
    pub fn dataset_version(self) -> Version {
        match self {
            PromptVersion::V1 => Version::Short,
            PromptVersion::V2 => Version::Long,
        }
    }

    /// Pairs one well-formed response yields.
    pub fn pairs_per_response(self) -> usize {
        match self {
            PromptVersion::V1 => 5,
            PromptVersion::V2 => 1,
        }
    }
}

impl std::str::FromStr for PromptVersion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(PromptVersion::V1),
            "v2" => Ok(PromptVersion::V2),
            other => Err(Error::InvalidArgument(format!("unknown prompt version `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatPrompt {
    pub system: String,
    pub user: String,
}

impl ChatPrompt {
    /// Short hex digest identifying the exact prompt text.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system.as_bytes());
        h.update([0u8]);
        h.update(self.user.as_bytes());
        crate::nn::hex(&h.finalize()[..8])
    }
}

pub fn delimit(caption: &str) -> String {
    format!("{DELIMITER}{caption}{DELIMITER}")
}

/// Text between the first pair of delimiters, if present.
pub fn extract_delimited(user: &str) -> Option<&str> {
    let rest = user.split_once(DELIMITER)?.1;
    Some(rest.split_once(DELIMITER)?.0)
}

fn render(system: &str, caption: &str) -> Result<ChatPrompt> {
    if caption.trim().is_empty() {
        return Err(Error::Empty("caption"));
    }
    Ok(ChatPrompt {
        system: system.to_string(),
        user: delimit(caption),
    })
}

pub fn render_prompt_v1(caption: &str) -> Result<ChatPrompt> {
    render(V1_SYSTEM, caption)
}

pub fn render_prompt_v2(caption: &str) -> Result<ChatPrompt> {
    render(V2_SYSTEM, caption)
}

pub fn render_prompt(version: PromptVersion, caption: &str) -> Result<ChatPrompt> {
    match version {
        PromptVersion::V1 => render_prompt_v1(caption),
        PromptVersion::V2 => render_prompt_v2(caption),
    }
}

pub fn render_verification(caption: &str, question: &str, answer: &str) -> ChatPrompt {
    ChatPrompt {
        system: VERIFY_SYSTEM.to_string(),
        user: format!("{}\nQuestion: {question}\nAnswer: {answer}", delimit(caption)),
    }
}
