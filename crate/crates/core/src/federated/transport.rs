//! Message transports for the round protocol.
//!
//! Both built-ins keep a transcript of every message they carried. The file
//! transport exchanges `round<k>_<site>.json` files in a shared directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::federated::messages::{Round, RoundMessage};

pub trait Transport {
    fn post(&mut self, msg: RoundMessage) -> Result<()>;

    /// Returns one `round` message from each of `senders` addressed to
    /// `recipient`, in the order of `senders`.
    fn collect(&mut self, round: Round, recipient: &str, senders: &[String]) -> Result<Vec<RoundMessage>>;

    /// Every message carried so far, in posting order.
    fn transcript(&self) -> &[RoundMessage];

    /// Stores a final artifact (e.g. `global.json`) next to the round messages.
    fn publish(&mut self, name: &str, contents: &str) -> Result<()>;
}

/// In-process mailbox. Missing messages fail immediately since nothing else
/// can deliver them while the caller is blocked.
#[derive(Debug, Default)]
pub struct InMemoryTransport {
    mailbox: BTreeMap<(Round, String, String), RoundMessage>,
    log: Vec<RoundMessage>,
    published: BTreeMap<String, String>,
}

impl InMemoryTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn published(&self, name: &str) -> Option<&str> {
        self.published.get(name).map(String::as_str)
    }
}

impl Transport for InMemoryTransport {
    fn post(&mut self, msg: RoundMessage) -> Result<()> {
        msg.verify()?;
        let key = (msg.round(), msg.sender.clone(), msg.recipient.clone());
        if self.mailbox.contains_key(&key) {
            return Err(Error::Protocol(format!(
                "duplicate {} message from `{}` to `{}`",
                key.0, key.1, key.2
            )));
        }
        self.log.push(msg.clone());
        self.mailbox.insert(key, msg);
        Ok(())
    }

    fn collect(&mut self, round: Round, recipient: &str, senders: &[String]) -> Result<Vec<RoundMessage>> {
        senders
            .iter()
            .map(|s| {
                self.mailbox
                    .get(&(round, s.clone(), recipient.to_string()))
                    .cloned()
                    .ok_or_else(|| Error::RoundTimeout {
                        round: round.to_string(),
                        site: if round.from_site() { s.clone() } else { recipient.to_string() },
                    })
            })
            .collect()
    }

    fn transcript(&self) -> &[RoundMessage] {
        &self.log
    }

    fn publish(&mut self, name: &str, contents: &str) -> Result<()> {
        self.published.insert(name.to_string(), contents.to_string());
        Ok(())
    }
}

/// Directory-based exchange of JSON round files.
#[derive(Debug)]
pub struct FileTransport {
    dir: PathBuf,
    deadline: Duration,
    poll: Duration,
    log: Vec<RoundMessage>,
}

impl FileTransport {
    pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(60);

    pub fn new(dir: impl Into<PathBuf>, deadline: Duration) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(FileTransport {
            dir,
            deadline,
            poll: Duration::from_millis(20),
            log: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn file_name(round: Round, site: &str) -> String {
        format!("round{}_{site}.json", round.number())
    }

    /// Parses every round file in `dir`, sorted by file name.
    pub fn read_transcript(dir: &Path) -> Result<Vec<RoundMessage>> {
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("round") && n.ends_with(".json"))
            })
            .collect();
        names.sort();
        names
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RoundMessage::from_json(&text)
            })
            .collect()
    }

    fn write_atomic(&self, name: &str, contents: &str) -> Result<()> {
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let dst = self.dir.join(name);
        fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }
}

impl Transport for FileTransport {
    fn post(&mut self, msg: RoundMessage) -> Result<()> {
        msg.verify()?;
        let name = Self::file_name(msg.round(), msg.site());
        if self.dir.join(&name).exists() {
            return Err(Error::Protocol(format!("round file {name} already exists")));
        }
        self.write_atomic(&name, &msg.to_json()?)?;
        self.log.push(msg);
        Ok(())
    }

    fn collect(&mut self, round: Round, recipient: &str, senders: &[String]) -> Result<Vec<RoundMessage>> {
        let start = Instant::now();
        let mut out = Vec::with_capacity(senders.len());
        for sender in senders {
            let site = if round.from_site() { sender.as_str() } else { recipient };
            let path = self.dir.join(Self::file_name(round, site));
            loop {
                if path.exists() {
                    break;
                }
                if start.elapsed() >= self.deadline {
                    return Err(Error::RoundTimeout {
                        round: round.to_string(),
                        site: site.to_string(),
                    });
                }
                thread::sleep(self.poll);
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let msg = RoundMessage::from_json(&text)?;
            if msg.round() != round || &msg.sender != sender || msg.recipient != recipient {
                return Err(Error::Protocol(format!(
                    "{} carries a {} message from `{}` to `{}`",
                    path.display(),
                    msg.round(),
                    msg.sender,
                    msg.recipient
                )));
            }
            out.push(msg);
        }
        Ok(out)
    }

    fn transcript(&self) -> &[RoundMessage] {
        &self.log
    }

    fn publish(&mut self, name: &str, contents: &str) -> Result<()> {
        self.write_atomic(name, contents)
    }
}
