//! Talking to an external text-generation service: prompt rendering, reply
//! parsing, and the `-Oz` fallback used when a reply is unusable.

use std::collections::HashMap;
use std::ops::ControlFlow;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::catalog::{parse_pipeline, PassCatalog, PassList};
use crate::dataset::{PromptRecord, TaskKind};
use crate::pool::ordered_map;
use crate::toolchain::{Backend, BinarySize, ModuleInput, ToolchainError};
use crate::validator::{SuiteRunner, ValidateError, Validator};

pub const FLAG_TUNING_SUFFIX: &str = "Provide your answer as a list of command line options to opt version 17.0.6, using the format:

\"$ opt -p '<passes>'\"

Where <passes> is a list of passes for the new pass manager, e.g. \"function(dce),module(default<Oz>),function(load-store-vectorizer)\".

Only include the passes list. Do not include file paths or other flags such as -o. Terminate the opt command line options with a newline.

Then report the optimized code that will be produced, delimited by <code> and </code> tags.

Finally, report the binary size the code before and after optimization using the template:

\"Before optimization: X bytes. After optimization: Y bytes.\"

Where X and Y are placeholders for integer binary sizes in bytes. Binary size is the summation of the .text and .data segment sizes of the object file generated by `clang-17 output.bc -c`, as reported by the `size` tool.

Include no other text in your response.";

pub const DISASSEMBLY_SUFFIX: &str =
    "Use LLVM version 17.0.6. Provide the IR enclosed by <code> and </code> tags.\n\nInclude no other text.";

/// Retries after the first attempt on transport failures.
pub const TRANSPORT_RETRIES: usize = 2;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no prompt suffix is defined for {0:?} records")]
    NoSuffix(TaskKind),
    #[error("invalid endpoint: {0}")]
    Endpoint(String),
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("unexpected response: {0}")]
    Response(String),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PromptStyle {
    /// The record prompt unchanged, for models trained on these templates.
    #[default]
    Native,
    /// The prompt followed by extra format instructions.
    ThirdParty,
}

pub fn render_prompt(record: &PromptRecord, style: PromptStyle) -> Result<String, ClientError> {
    match style {
        PromptStyle::Native => Ok(record.prompt.clone()),
        PromptStyle::ThirdParty => {
            let suffix = match record.task {
                TaskKind::FlagTune => FLAG_TUNING_SUFFIX,
                TaskKind::Disassemble => DISASSEMBLY_SUFFIX,
                other => return Err(ClientError::NoSuffix(other)),
            };
            Ok(format!("{}\n\n{suffix}", record.prompt.trim_end()))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParsedFlagTuningReply {
    pub pass_list: Option<PassList>,
    pub predicted_before: Option<u64>,
    pub predicted_after: Option<u64>,
    pub optimized_code: Option<String>,
    pub diagnostics: Vec<String>,
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static pattern"))
}

fn opt_span() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    regex(&R, r"(?:`opt|\$ *opt)\s+-p\s+'([^'\n]*)'")
}

fn native_sizes() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    regex(
        &R,
        r"object file size of (\d+) which (?:can be reduced to (\d+)|(cannot be reduced further))",
    )
}

fn suffix_sizes() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    regex(&R, r"Before optimization:\s*(\d+)\s*bytes\.?\s*After optimization:\s*(\d+)\s*bytes")
}

fn number(s: &str, diagnostics: &mut Vec<String>) -> Option<u64> {
    match s.parse() {
        Ok(n) => Some(n),
        Err(_) => {
            diagnostics.push(format!("size `{s}` is out of range"));
            None
        }
    }
}

/// Extracts the first `opt -p '...'` pipeline, the size claims and the code
/// block. Never fails; anything missing is left `None` with a diagnostic.
pub fn parse_flag_tuning_reply(text: &str, catalog: &PassCatalog) -> ParsedFlagTuningReply {
    let mut reply = ParsedFlagTuningReply::default();
    let diags = &mut reply.diagnostics;

    match opt_span().captures(text) {
        Some(c) => match parse_pipeline(&c[1], catalog) {
            Ok(pl) => reply.pass_list = Some(pl),
            Err(e) => diags.push(format!("pipeline `{}`: {e}", &c[1])),
        },
        None => diags.push("no `opt -p '...'` span".to_string()),
    }

    let native = native_sizes().captures(text).map(|c| {
        let before = number(&c[1], diags);
        let after = match c.get(2) {
            Some(m) => number(m.as_str(), diags),
            None => before,
        };
        (before, after)
    });
    let suffix = suffix_sizes()
        .captures(text)
        .map(|c| (number(&c[1], diags), number(&c[2], diags)));
    let sizes = match (native, suffix) {
        (Some(n), Some(s)) => {
            if n != s {
                let msg = format!("size templates disagree: {n:?} vs {s:?}; using the latter");
                log::warn!("{msg}");
                diags.push(msg);
            }
            Some(s)
        }
        (n, s) => s.or(n),
    };
    match sizes {
        Some((b, a)) => (reply.predicted_before, reply.predicted_after) = (b, a),
        None => diags.push("no binary size report".to_string()),
    }

    match parse_code_block(text) {
        Ok(code) => reply.optimized_code = Some(code.to_string()),
        Err(e) => {
            // The no-improvement answer legitimately carries no code.
            if reply.pass_list.is_some() {
                diags.push(e);
            }
        }
    }
    reply
}

/// The contents of the first balanced `<code>`...`</code>` span.
pub fn parse_code_block(text: &str) -> Result<&str, String> {
    const OPEN: &str = "<code>";
    const CLOSE: &str = "</code>";
    let start = text.find(OPEN).ok_or("no <code> tag")? + OPEN.len();
    let mut depth = 1usize;
    let mut pos = start;
    loop {
        let rest = &text[pos..];
        let close = rest.find(CLOSE).ok_or("unclosed <code> tag")?;
        match rest.find(OPEN) {
            Some(open) if open < close => {
                depth += 1;
                pos += open + OPEN.len();
            }
            _ => {
                depth -= 1;
                if depth == 0 {
                    return Ok(&text[start..pos + close]);
                }
                pos += close + CLOSE.len();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Effective {
    pub pass_list: PassList,
    pub size: BinarySize,
    /// Set when `-Oz` stood in for the model's answer, with the reason.
    pub substituted: Option<String>,
}

/// The model's pass list if it parses, passes validation and compiles;
/// otherwise `-Oz` at `baseline`.
pub fn evaluate_with_fallback<B, R>(
    reply: &ParsedFlagTuningReply,
    m: &ModuleInput,
    baseline: BinarySize,
    backend: &B,
    validator: Option<&Validator<'_, R>>,
    timeout: Duration,
) -> Result<Effective, ClientError>
where
    B: Backend + ?Sized,
    R: SuiteRunner + ?Sized,
{
    let fallback = |why: String| Effective {
        pass_list: PassList::oz(),
        size: baseline,
        substituted: Some(why),
    };
    let Some(pl) = &reply.pass_list else {
        return Ok(fallback("no pass list in reply".into()));
    };
    if let Some(v) = validator {
        let verdict = v.evaluate(pl)?;
        if !verdict.accepted() {
            return Ok(fallback(format!("rejected: {:?}", verdict.outcome)));
        }
    }
    let out = backend.compile(m, pl, timeout)?;
    match out.size.filter(|_| out.is_ok()) {
        Some(size) => Ok(Effective {
            pass_list: pl.clone(),
            size,
            substituted: None,
        }),
        None => Ok(fallback(format!("compilation failed ({:?})", out.status))),
    }
}

/// Anything that turns a prompt into a reply.
pub trait TextGenerator: Sync {
    fn generate(&self, prompt: &str) -> Result<String, ClientError>;
}

impl<F> TextGenerator for F
where
    F: Fn(&str) -> Result<String, ClientError> + Sync,
{
    fn generate(&self, prompt: &str) -> Result<String, ClientError> {
        self(prompt)
    }
}

/// Generates replies for `prompts` with at most `window` requests in flight.
/// Results come back in prompt order.
pub fn generate_all<G: TextGenerator + ?Sized>(
    generator: &G,
    prompts: &[String],
    window: usize,
) -> Vec<Result<String, ClientError>> {
    let mut out = Vec::with_capacity(prompts.len());
    ordered_map(
        prompts.iter(),
        window,
        |p| generator.generate(p),
        |r| {
            out.push(r);
            ControlFlow::<()>::Continue(())
        },
    );
    out
}

fn default_pointer() -> String {
    "/choices/0/message/content".to_string()
}

fn default_timeout() -> u64 {
    120
}

fn default_max_tokens() -> u32 {
    4096
}

/// Connection settings for an HTTP inference server.
///
/// `body_template` is any JSON value; string leaves equal to `{{prompt}}`,
/// `{{model}}` or `{{max_tokens}}` are substituted. Without one a
/// chat-completions request is sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceEndpoint {
    pub url: String,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub body_template: Option<Value>,
    /// JSON pointer to the reply text in the response.
    #[serde(default = "default_pointer")]
    pub response_pointer: String,
}

impl InferenceEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        InferenceEndpoint {
            url: url.into(),
            model: String::new(),
            auth_env: None,
            timeout_secs: default_timeout(),
            max_tokens: default_max_tokens(),
            body_template: None,
            response_pointer: default_pointer(),
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout_secs == 0 {
            return Err(ClientError::Endpoint("timeout must be positive".into()));
        }
        if !(self.url.starts_with("http://") || self.url.starts_with("https://")) {
            return Err(ClientError::Endpoint(format!("`{}` is not an http(s) URL", self.url)));
        }
        Ok(())
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        let template = self.body_template.clone().unwrap_or_else(|| {
            serde_json::json!({
                "model": "{{model}}",
                "max_tokens": "{{max_tokens}}",
                "messages": [{"role": "user", "content": "{{prompt}}"}],
            })
        });
        let vars: HashMap<&str, Value> = [
            ("{{prompt}}", Value::from(prompt)),
            ("{{model}}", Value::from(self.model.as_str())),
            ("{{max_tokens}}", Value::from(self.max_tokens)),
        ]
        .into_iter()
        .collect();
        substitute(template, &vars)
    }
}

fn substitute(v: Value, vars: &HashMap<&str, Value>) -> Value {
    match v {
        Value::String(s) => vars.get(s.as_str()).cloned().unwrap_or(Value::String(s)),
        Value::Array(a) => Value::Array(a.into_iter().map(|x| substitute(x, vars)).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, x)| (k, substitute(x, vars))).collect()),
        other => other,
    }
}

pub struct HttpClient {
    endpoint: InferenceEndpoint,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(endpoint: InferenceEndpoint) -> Result<Self, ClientError> {
        endpoint.validate()?;
        let token = match &endpoint.auth_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ClientError::Endpoint(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpClient { endpoint, token, agent })
    }

    fn attempt(&self, body: &str) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.endpoint.url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(ClientError::Response(format!("HTTP {status}: {}", text.trim()))));
        }
        let json: Value =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(ClientError::Response(format!("not JSON: {e}"))))?;
        json.pointer(&self.endpoint.response_pointer)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                Attempt::Fatal(ClientError::Response(format!(
                    "no string at {}",
                    self.endpoint.response_pointer
                )))
            })
    }
}

enum Attempt {
    Retry(String),
    Fatal(ClientError),
}

impl TextGenerator for HttpClient {
    fn generate(&self, prompt: &str) -> Result<String, ClientError> {
        let body = self.endpoint.request_body(prompt).to_string();
        let mut last = String::new();
        for attempt in 0..=TRANSPORT_RETRIES {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    log::debug!("attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(ClientError::Transport {
            attempts: TRANSPORT_RETRIES + 1,
            message: last,
        })
    }
}
