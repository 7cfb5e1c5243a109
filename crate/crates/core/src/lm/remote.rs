//! Adapter for a model served over TCP.
//!
//! One request per connection: the client writes a single JSON line
//! `{"context": [int, ...]}` and reads back one JSON line
//! `{"logprobs": [float, ...]}` with exactly vocabulary-size entries.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_tokens, LmError, LmScorer, DEFAULT_LOGPROB_FLOOR};
use crate::token::TokenId;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize)]
struct Request<'a> {
    context: &'a [TokenId],
}

#[derive(Deserialize)]
struct Response {
    logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RemoteLm {
    addrs: Vec<SocketAddr>,
    vocab_size: usize,
    timeout: Duration,
    floor: f64,
}

impl RemoteLm {
    pub fn new(endpoint: &str, vocab_size: usize) -> Result<Self, LmError> {
        if vocab_size == 0 {
            return Err(LmError::EmptyVocabulary);
        }
        let addrs: Vec<SocketAddr> = endpoint
            .to_socket_addrs()
            .map_err(LmError::Connection)?
            .collect();
        if addrs.is_empty() {
            return Err(LmError::Connection(std::io::Error::new(
                ErrorKind::NotFound,
                format!("`{endpoint}` resolved to no addresses"),
            )));
        }
        Ok(Self {
            addrs,
            vocab_size,
            timeout: DEFAULT_TIMEOUT,
            floor: DEFAULT_LOGPROB_FLOOR,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn io_error(&self, e: std::io::Error) -> LmError {
        match e.kind() {
            ErrorKind::TimedOut | ErrorKind::WouldBlock => LmError::Timeout(self.timeout),
            _ => LmError::Connection(e),
        }
    }

    fn connect(&self) -> Result<TcpStream, LmError> {
        let mut last = None;
        for addr in &self.addrs {
            match TcpStream::connect_timeout(addr, self.timeout) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(self.io_error(last.expect("at least one address")))
    }

    /// Sends `context` and validates the returned distribution.
    pub fn remote_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        check_tokens(context, self.vocab_size)?;
        let mut stream = self.connect()?;
        stream
            .set_read_timeout(Some(self.timeout))
            .and_then(|_| stream.set_write_timeout(Some(self.timeout)))
            .map_err(LmError::Connection)?;
        let mut body = serde_json::to_vec(&Request { context }).expect("request serializes");
        body.push(b'\n');
        stream.write_all(&body).map_err(|e| self.io_error(e))?;
        stream.flush().map_err(|e| self.io_error(e))?;

        let mut line = String::new();
        BufReader::new(stream)
            .read_line(&mut line)
            .map_err(|e| self.io_error(e))?;
        if line.trim().is_empty() {
            return Err(LmError::MalformedResponse("empty response".into()));
        }
        let resp: Response = serde_json::from_str(line.trim())
            .map_err(|e| LmError::MalformedResponse(e.to_string()))?;
        if resp.logprobs.len() != self.vocab_size {
            return Err(LmError::VocabularyMismatch {
                expected: self.vocab_size,
                got: resp.logprobs.len(),
            });
        }
        if let Some(bad) = resp.logprobs.iter().find(|x| x.is_nan() || **x > 0.0) {
            return Err(LmError::MalformedResponse(format!(
                "invalid log-probability {bad}"
            )));
        }
        Ok(resp
            .logprobs
            .into_iter()
            .map(|x| x.max(self.floor))
            .collect())
    }
}

impl LmScorer for RemoteLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        self.remote_logprobs(context)
    }
}
