//! Token-level prefix tree over canonical DocIDs.
//!
//! The trie is immutable once built and shared across decoding sessions.
//! Duplicate prevention inside one ranked list is done with an
//! [`ExclusionSet`] owned by the session, which tracks how many excluded
//! DocIDs sit below each node so that continuation queries stay O(children).

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::corpus::{Corpus, CorpusError};
use crate::token::{is_special, TokenId, Vocabulary, UNK};

#[derive(Debug, Error)]
pub enum TrieError {
    #[error("DocID `{0}` tokenizes to an empty sequence")]
    EmptyDocId(String),
    #[error("DocID `{0}` contains an unknown or reserved token")]
    InvalidToken(String),
    #[error("DocIDs `{0}` and `{1}` share the same token sequence")]
    Collision(String, String),
    #[error("prefix is not a path in the DocID trie")]
    InvalidPrefix,
    #[error("unknown DocID `{0}`")]
    UnknownDocId(String),
    #[error("trie snapshot line {line}: {message}")]
    Snapshot { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type NodeId = usize;
const ROOT: NodeId = 0;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Node {
    children: BTreeMap<TokenId, NodeId>,
    parent: Option<NodeId>,
    /// Index into `DocIdTrie::docids` when a DocID ends here.
    terminal: Option<usize>,
    subtree_count: usize,
}

/// Result of a continuation query.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Continuations {
    /// Tokens that extend the prefix toward a non-excluded DocID, ascending.
    pub tokens: Vec<TokenId>,
    /// The prefix itself spells a non-excluded DocID.
    pub close_permitted: bool,
}

impl Continuations {
    pub fn is_dead_end(&self) -> bool {
        self.tokens.is_empty() && !self.close_permitted
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocIdTrie {
    nodes: Vec<Node>,
    docids: Vec<String>,
    by_docid: HashMap<String, usize>,
    terminal_node: Vec<NodeId>,
}

impl Default for DocIdTrie {
    fn default() -> Self {
        Self {
            nodes: vec![Node::default()],
            docids: Vec::new(),
            by_docid: HashMap::new(),
            terminal_node: Vec::new(),
        }
    }
}

impl DocIdTrie {
    /// Builds the trie from every corpus DocID.
    pub fn build(corpus: &Corpus, vocab: &Vocabulary) -> Result<Self, TrieError> {
        Self::from_docids(
            corpus
                .doc_ids()
                .map(|id| (id.to_string(), vocab.encode(id))),
        )
    }

    /// Builds from explicit (DocID, token path) pairs.
    pub fn from_docids(
        items: impl IntoIterator<Item = (String, Vec<TokenId>)>,
    ) -> Result<Self, TrieError> {
        let mut trie = Self::default();
        for (docid, path) in items {
            trie.insert(docid, &path)?;
        }
        Ok(trie)
    }

    fn insert(&mut self, docid: String, path: &[TokenId]) -> Result<(), TrieError> {
        if path.is_empty() {
            return Err(TrieError::EmptyDocId(docid));
        }
        if path.iter().any(|&t| t == UNK || is_special(t)) {
            return Err(TrieError::InvalidToken(docid));
        }
        if self.by_docid.contains_key(&docid) {
            return Err(TrieError::Collision(docid.clone(), docid));
        }
        let mut node = ROOT;
        for &t in path {
            node = match self.nodes[node].children.get(&t) {
                Some(&child) => child,
                None => {
                    let child = self.nodes.len();
                    self.nodes.push(Node {
                        parent: Some(node),
                        ..Node::default()
                    });
                    self.nodes[node].children.insert(t, child);
                    child
                }
            };
        }
        if let Some(existing) = self.nodes[node].terminal {
            return Err(TrieError::Collision(self.docids[existing].clone(), docid));
        }
        let index = self.docids.len();
        self.nodes[node].terminal = Some(index);
        self.by_docid.insert(docid.clone(), index);
        self.docids.push(docid);
        self.terminal_node.push(node);
        let mut cur = Some(node);
        while let Some(n) = cur {
            self.nodes[n].subtree_count += 1;
            cur = self.nodes[n].parent;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.docids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docids.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn docids(&self) -> &[String] {
        &self.docids
    }

    pub fn contains_docid(&self, docid: &str) -> bool {
        self.by_docid.contains_key(docid)
    }

    fn walk(&self, prefix: &[TokenId]) -> Result<NodeId, TrieError> {
        let mut node = ROOT;
        for t in prefix {
            node = *self.nodes[node]
                .children
                .get(t)
                .ok_or(TrieError::InvalidPrefix)?;
        }
        Ok(node)
    }

    /// True when `tokens` is exactly the token path of some DocID.
    pub fn contains(&self, tokens: &[TokenId]) -> bool {
        self.walk(tokens)
            .map(|n| self.nodes[n].terminal.is_some())
            .unwrap_or(false)
    }

    /// DocID spelled exactly by `tokens`, if any.
    pub fn docid_at(&self, tokens: &[TokenId]) -> Option<&str> {
        let node = self.walk(tokens).ok()?;
        self.nodes[node].terminal.map(|i| self.docids[i].as_str())
    }

    /// Token path of a DocID, recovered by walking parent links.
    pub fn path_of(&self, docid: &str) -> Option<Vec<TokenId>> {
        let &index = self.by_docid.get(docid)?;
        let mut path = Vec::new();
        let mut node = self.terminal_node[index];
        while let Some(parent) = self.nodes[node].parent {
            let token = self.nodes[parent]
                .children
                .iter()
                .find(|(_, &c)| c == node)
                .map(|(&t, _)| t)
                .expect("child is linked from its parent");
            path.push(token);
            node = parent;
        }
        path.reverse();
        Some(path)
    }

    /// Tokens that extend `prefix` toward at least one non-excluded DocID.
    pub fn allowed_continuations(
        &self,
        prefix: &[TokenId],
        excl: &ExclusionSet,
    ) -> Result<Continuations, TrieError> {
        let node = self.walk(prefix)?;
        let n = &self.nodes[node];
        let tokens = n
            .children
            .iter()
            .filter(|(_, &child)| excl.available(self, child) > 0)
            .map(|(&t, _)| t)
            .collect();
        let close_permitted = n.terminal.is_some_and(|i| !excl.is_excluded_index(i));
        Ok(Continuations {
            tokens,
            close_permitted,
        })
    }

    /// Whether at least one DocID remains available under `excl`.
    pub fn has_available(&self, excl: &ExclusionSet) -> bool {
        excl.available(self, ROOT) > 0
    }

    /// Checks that every node's count equals the number of terminals below it.
    pub fn audit(&self) -> bool {
        fn count(trie: &DocIdTrie, node: NodeId, ok: &mut bool) -> usize {
            let n = &trie.nodes[node];
            let mut total = usize::from(n.terminal.is_some());
            for &child in n.children.values() {
                total += count(trie, child, ok);
            }
            if total != n.subtree_count {
                *ok = false;
            }
            total
        }
        let mut ok = true;
        let total = count(self, ROOT, &mut ok);
        ok && total == self.docids.len()
    }

    /// Preorder dump, one node per line: `depth token_id terminal_flag`.
    /// The root is implicit.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut stack: Vec<(NodeId, usize)> = self.nodes[ROOT]
            .children
            .values()
            .rev()
            .map(|&c| (c, 1))
            .collect();
        let mut token_of = vec![TokenId(0); self.nodes.len()];
        for n in &self.nodes {
            for (&t, &c) in &n.children {
                token_of[c] = t;
            }
        }
        while let Some((node, depth)) = stack.pop() {
            let n = &self.nodes[node];
            writeln!(
                w,
                "{} {} {}",
                depth,
                token_of[node].0,
                u8::from(n.terminal.is_some())
            )?;
            for &c in n.children.values().rev() {
                stack.push((c, depth + 1));
            }
        }
        Ok(())
    }

    /// Rebuilds a trie from a preorder snapshot. Terminal identities are
    /// resolved against the DocIDs of `corpus` under `vocab`.
    pub fn read_snapshot<R: BufRead>(
        r: R,
        corpus: &Corpus,
        vocab: &Vocabulary,
    ) -> Result<Self, TrieError> {
        let by_path: HashMap<Vec<TokenId>, String> = corpus
            .doc_ids()
            .map(|id| (vocab.encode(id), id.to_string()))
            .collect();
        let mut items = Vec::new();
        let mut path: Vec<TokenId> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |message: &str| TrieError::Snapshot {
                line: i + 1,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [depth, token, flag] = fields[..] else {
                return Err(bad("expected three fields"));
            };
            let depth: usize = depth.parse().map_err(|_| bad("bad depth"))?;
            let token: u32 = token.parse().map_err(|_| bad("bad token id"))?;
            if depth == 0 || depth > path.len() + 1 {
                return Err(bad("depth does not follow preorder"));
            }
            path.truncate(depth - 1);
            path.push(TokenId(token));
            match flag {
                "0" => {}
                "1" => {
                    let id = by_path
                        .get(&path)
                        .ok_or_else(|| bad("terminal path matches no corpus DocID"))?;
                    items.push((id.clone(), path.clone()));
                }
                _ => return Err(bad("terminal flag must be 0 or 1")),
            }
        }
        let mut trie = Self::from_docids(items)?;
        // Snapshot order lists DocIDs by token path, not by DocID.
        trie.reindex_sorted();
        Ok(trie)
    }

    fn reindex_sorted(&mut self) {
        let mut order: Vec<usize> = (0..self.docids.len()).collect();
        order.sort_by(|&a, &b| self.docids[a].cmp(&self.docids[b]));
        let mut new_index = vec![0; order.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        for n in &mut self.nodes {
            if let Some(t) = n.terminal.as_mut() {
                *t = new_index[*t];
            }
        }
        let docids = std::mem::take(&mut self.docids);
        let terminal_node = std::mem::take(&mut self.terminal_node);
        self.docids = order.iter().map(|&o| docids[o].clone()).collect();
        self.terminal_node = order.iter().map(|&o| terminal_node[o]).collect();
        self.by_docid = self
            .docids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i))
            .collect();
    }

    /// Structural comparison that ignores node numbering.
    pub fn same_structure(&self, other: &Self) -> bool {
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.write_snapshot(&mut a).expect("write to vec");
        other.write_snapshot(&mut b).expect("write to vec");
        a == b && {
            let mut x = self.docids.clone();
            let mut y = other.docids.clone();
            x.sort();
            y.sort();
            x == y
        }
    }
}

/// Per-session set of DocIDs that may no longer be generated.
#[derive(Debug, Clone, Default)]
pub struct ExclusionSet {
    excluded: Vec<bool>,
    excluded_below: HashMap<NodeId, usize>,
    count: usize,
}

impl ExclusionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn is_excluded_index(&self, index: usize) -> bool {
        self.excluded.get(index).copied().unwrap_or(false)
    }

    pub fn is_excluded(&self, trie: &DocIdTrie, docid: &str) -> bool {
        trie.by_docid
            .get(docid)
            .is_some_and(|&i| self.is_excluded_index(i))
    }

    fn available(&self, trie: &DocIdTrie, node: NodeId) -> usize {
        trie.nodes[node].subtree_count - self.excluded_below.get(&node).copied().unwrap_or(0)
    }

    /// Forbids `docid` for the rest of the session. Excluding twice is a no-op.
    pub fn exclude(&mut self, trie: &DocIdTrie, docid: &str) -> Result<(), TrieError> {
        let &index = trie
            .by_docid
            .get(docid)
            .ok_or_else(|| TrieError::UnknownDocId(docid.to_string()))?;
        if self.excluded.len() < trie.docids.len() {
            self.excluded.resize(trie.docids.len(), false);
        }
        if self.excluded[index] {
            return Ok(());
        }
        self.excluded[index] = true;
        self.count += 1;
        let mut cur = Some(trie.terminal_node[index]);
        while let Some(n) = cur {
            *self.excluded_below.entry(n).or_insert(0) += 1;
            cur = trie.nodes[n].parent;
        }
        Ok(())
    }

    /// Excluded DocIDs in trie index order.
    pub fn docids<'t>(&self, trie: &'t DocIdTrie) -> Vec<&'t str> {
        self.excluded
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(|(i, _)| trie.docids[i].as_str())
            .collect()
    }
}
