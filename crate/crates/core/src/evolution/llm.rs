//! Chat-completion crossover: prompt rendering, clients, and response parsing.

use std::io::BufRead;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingKey(String),
    #[error("mock response file: {0}")]
    Mock(String),
}

impl LlmError {
    fn retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub retries: u32,
    /// Requests allowed in flight at once.
    pub max_concurrent: usize,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4.1-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 1.0,
            timeout_secs: 60,
            retries: 3,
            max_concurrent: 4,
            min_interval_ms: 0,
        }
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String, LlmError>;
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: String,
}

/// Request gate: bounded concurrency plus a minimum start interval.
struct Gate {
    state: Mutex<(usize, Option<Instant>)>,
    freed: Condvar,
    max: usize,
    interval: Duration,
}

impl Gate {
    fn acquire(&self) {
        let mut s = self.state.lock().expect("gate lock");
        while s.0 >= self.max {
            s = self.freed.wait(s).expect("gate lock");
        }
        s.0 += 1;
        if let Some(last) = s.1 {
            let next = last + self.interval;
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            }
        }
        s.1 = Some(Instant::now());
    }

    fn release(&self) {
        self.state.lock().expect("gate lock").0 -= 1;
        self.freed.notify_one();
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpChatClient {
    cfg: LlmConfig,
    key: String,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl HttpChatClient {
    pub fn new(cfg: LlmConfig) -> Result<Self, LlmError> {
        let key = std::env::var(&cfg.api_key_env)
            .map_err(|_| LlmError::MissingKey(cfg.api_key_env.clone()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let gate = Gate {
            state: Mutex::new((0, None)),
            freed: Condvar::new(),
            max: cfg.max_concurrent.max(1),
            interval: Duration::from_millis(cfg.min_interval_ms),
        };
        Ok(HttpChatClient {
            cfg,
            key,
            http,
            gate,
        })
    }

    fn request_once(&self, system: &str, user: &str) -> Result<String, LlmError> {
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: vec![
                Message {
                    role: "system",
                    content: system,
                },
                Message {
                    role: "user",
                    content: user,
                },
            ],
            temperature: self.cfg.temperature,
        };
        let url = format!(
            "{}/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let resp = self
            .http
            .post(url)
            .bearer_auth(&self.key)
            .json(&body)
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(LlmError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("no choices".into()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, system: &str, user: &str) -> Result<String, LlmError> {
        let mut attempt = 0;
        loop {
            self.gate.acquire();
            let out = self.request_once(system, user);
            self.gate.release();
            match out {
                Err(e) if e.retryable() && attempt < self.cfg.retries => {
                    attempt += 1;
                    log::warn!(
                        "chat request failed ({e}); retry {attempt}/{}",
                        self.cfg.retries
                    );
                    std::thread::sleep(Duration::from_millis(250 << attempt.min(6)));
                }
                other => return other,
            }
        }
    }
}

/// Replays canned responses in order, wrapping around at the end.
pub struct MockChatClient {
    responses: Vec<String>,
    next: Mutex<usize>,
}

#[derive(Deserialize)]
struct MockLine {
    response: String,
}

impl MockChatClient {
    pub fn new(responses: Vec<String>) -> Self {
        MockChatClient {
            responses,
            next: Mutex::new(0),
        }
    }

    /// One JSON object per line: `{"response": "..."}`.
    pub fn from_jsonl(path: &Path) -> Result<Self, LlmError> {
        let f = std::fs::File::open(path).map_err(|e| LlmError::Mock(e.to_string()))?;
        let mut responses = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| LlmError::Mock(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let m: MockLine = serde_json::from_str(&line)
                .map_err(|e| LlmError::Mock(format!("line {}: {e}", i + 1)))?;
            responses.push(m.response);
        }
        if responses.is_empty() {
            return Err(LlmError::Mock("no responses".into()));
        }
        Ok(MockChatClient::new(responses))
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, _system: &str, _user: &str) -> Result<String, LlmError> {
        let mut i = self.next.lock().expect("mock lock");
        if self.responses.is_empty() {
            return Err(LlmError::Mock("no responses".into()));
        }
        let r = self.responses[*i % self.responses.len()].clone();
        *i += 1;
        Ok(r)
    }
}

/// Body of the first fenced code block, without the language tag.
pub fn extract_fenced_block(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let rest = &text[start + 3..];
    let body_start = rest.find('\n')? + 1;
    let body = &rest[body_start..];
    let end = body.find("```")?;
    Some(body[..end].trim().to_string())
}

const SYSTEM_PROMPT: &str = "Role: AI Research Assistant (Imitation Learning)";

const USER_TEMPLATE: &str = r#"Overall Objective:
Collaborate to discover novel reward functions for Adversarial Imitation Learning (AIL) that improve training stability and final policy performance. Performance is measured by a performance score (higher is better).

Background: Adversarial Imitation Learning Setting

You have a policy pi and expert transitions (s,a) stored in a dataset D_E.
The typical learning loop involves:
1. Sampling transitions (s,a) into a dataset D_pi using the current policy pi.
2. Training a discriminator D(s,a) to distinguish between expert transitions (D_E) and policy transitions (D_pi) using a standard binary cross-entropy loss:
   L = -E_{(s,a)~D_E}[log(D(s,a))] - E_{(s,a)~D_pi}[log(1 - D(s,a))]
3. The discriminator's output logits, l(s,a), approximate the log-density ratio:
   l(s,a) ~ log(rho_E(s,a) / rho_pi(s,a)).
4. Policy transitions (s,a) in D_pi are assigned rewards based on these logits using a reward function r(s,a) = f(l(s,a)). Examples include:
   - GAIL: r = -log(1 - D) = softplus(l) (Smooth rectifier: near 0 for negative logits, linear for positive).
   - AIRL: r = log D - log(1 - D) = l (Linear everywhere).
   - FAIRL: r = -l * exp(l) (Rises from 0 to 1/e at l = -1, then drops sharply).
   - LOGD: r = log D = -softplus(-l) (Linear for negative logits, near 0 for positive).
5. The policy pi is updated using reinforcement learning (e.g., PPO, SAC) with these calculated rewards.
6. Steps 1-5 are repeated.

Your Task in This Interaction:

You will be presented with two reward functions, f1 and f2 (defined based on logits x), along with their observed performance. Your goal is to propose a *new* function (not the same as GAIL, AIRL, FAIRL, LOGD), f3, that aims to perform better (higher score).

Instructions:
1. Analyze f1 and f2:
   - Consider their mathematical shapes and properties (e.g., monotonicity, bounds, smoothness).
   - Consider their behavior when the logits are near zero, positive, and negative. What signal do they provide?
   - Relate these properties to the provided performance data. Why might one function have performed better/worse?
2. Design f3:
   - Based on your analysis, propose a *new* function f3.
   - Aim for diversity: Propose a mix of novel functions and variations on the provided examples.
3. Implementation Requirements:
   - Write f3 as a single expression in the reward expression language below, using the variable x for the logit.
   - Numbers: decimal literals such as 0.5, -2, 1e-3.
   - Infix operators: + - * / with the usual precedence; parentheses for grouping.
   - Unary functions: neg, exp, log, abs, tanh, sigmoid, softplus, gelu.
   - Binary functions: min(a, b), max(a, b).
   - Piecewise: branch(t, a, b) evaluates a when x <= t and b otherwise (t is a number).
   - At most 128 nodes and nesting depth 16. log clamps its argument at 1e-12, division clamps the divisor magnitude at 1e-12, exp clamps its argument at 60.
   - Enclose the expression alone in a single fenced code block.

Response Format:

```
<expression in x>
```

Pair of Reward Functions:

Function 1:
```
{f1}
```
Score: {s1}

Function 2:
```
{f2}
```
Score: {s2}
"#;

/// The crossover request for one parent pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system: String,
    pub user: String,
    pub parents: [String; 2],
    pub scores: [f64; 2],
}

impl PromptBundle {
    pub fn render(parents: [&str; 2], scores: [f64; 2]) -> Self {
        let user = USER_TEMPLATE
            .replace("{f1}", parents[0])
            .replace("{s1}", &format_score(scores[0]))
            .replace("{f2}", parents[1])
            .replace("{s2}", &format_score(scores[1]));
        PromptBundle {
            system: SYSTEM_PROMPT.to_string(),
            user,
            parents: [parents[0].to_string(), parents[1].to_string()],
            scores,
        }
    }

    /// System and user text joined, as hashed in the history ledger.
    pub fn full_text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }
}

fn format_score(s: f64) -> String {
    format!("{s:.4}")
}
