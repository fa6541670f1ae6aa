//! Prefix tree over entity token sequences.
//!
//! Nodes live in an arena; the root stands for the start-of-sequence position.
//! A sequence ends where a node carries the terminal flag, so EOS never appears
//! as an edge label and a name that is a prefix of another name is just a
//! terminal node with children.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "ETRIE\0\x01\0"
//! vocab     u32
//! node*     preorder, children visited in ascending token order
//!   terminal    u8
//!   n_children  u32
//!   (token u32, offset u64) * n_children   offset = absolute byte offset of the child record
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub const MAGIC: [u8; 8] = *b"ETRIE\x00\x01\x00";
const HEADER_LEN: usize = 12;

/// Arena index of a trie node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

#[derive(Clone, Debug, Default)]
struct Node {
    /// Sorted by token id.
    children: Vec<(TokenId, NodeId)>,
    terminal: bool,
}

impl Node {
    fn child(&self, token: TokenId) -> Option<NodeId> {
        self.children
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| self.children[i].1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrieStats {
    pub leaf_count: usize,
    pub internal_node_count: usize,
}

impl fmt::Display for TrieStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "leaves={} internal_nodes={}",
            self.leaf_count, self.internal_node_count
        )
    }
}

#[derive(Clone)]
pub struct EntityTrie {
    nodes: Vec<Node>,
    vocab_size: u32,
    leaf_count: usize,
}

impl EntityTrie {
    /// An empty trie. Accepts nothing until something is inserted.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            nodes: vec![Node::default()],
            vocab_size: vocab_size as u32,
            leaf_count: 0,
        }
    }

    pub fn build<I, S>(sequences: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[TokenId]>,
    {
        let mut trie = Self::new(vocab_size);
        for seq in sequences {
            trie.insert(seq.as_ref())?;
        }
        if trie.leaf_count == 0 {
            return Err(Error::EmptyTrie);
        }
        Ok(trie)
    }

    /// Inserts in place. Re-inserting an existing sequence is a no-op.
    pub fn insert(&mut self, seq: &[TokenId]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        for &tok in seq {
            if tok.0 >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: tok.0,
                    size: self.vocab_size as usize,
                });
            }
            if tok == TokenId::EOS || tok == TokenId::SOS {
                return Err(Error::ReservedToken(tok));
            }
        }
        let mut cur = 0usize;
        for &tok in seq {
            let node = &self.nodes[cur];
            cur = match node.children.binary_search_by_key(&tok, |&(t, _)| t) {
                Ok(i) => node.children[i].1 .0 as usize,
                Err(i) => {
                    let id = NodeId(self.nodes.len() as u32);
                    self.nodes[cur].children.insert(i, (tok, id));
                    self.nodes.push(Node::default());
                    id.0 as usize
                }
            };
        }
        if !self.nodes[cur].terminal {
            self.nodes[cur].terminal = true;
            self.leaf_count += 1;
        }
        Ok(())
    }

    /// Returns a new version with `seq` added, leaving `self` untouched.
    pub fn with_inserted(&self, seq: &[TokenId]) -> Result<Self> {
        let mut next = self.clone();
        next.insert(seq)?;
        Ok(next)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_count == 0
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    pub fn child(&self, node: NodeId, token: TokenId) -> Option<NodeId> {
        self.nodes[node.0 as usize].child(token)
    }

    pub fn children(&self, node: NodeId) -> impl Iterator<Item = TokenId> + '_ {
        self.nodes[node.0 as usize].children.iter().map(|&(t, _)| t)
    }

    pub fn is_terminal(&self, node: NodeId) -> bool {
        self.nodes[node.0 as usize].terminal
    }

    /// Follows `prefix` from the root.
    pub fn walk(&self, prefix: &[TokenId]) -> Option<NodeId> {
        prefix
            .iter()
            .try_fold(self.root(), |node, &tok| self.child(node, tok))
    }

    /// Tokens allowed after `prefix`, ascending, with EOS when `prefix` is a
    /// complete sequence. Empty when `prefix` leaves the trie.
    pub fn allowed_continuations(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let Some(node) = self.walk(prefix) else {
            return Vec::new();
        };
        let mut out: Vec<TokenId> = self.children(node).collect();
        if self.is_terminal(node) {
            out.push(TokenId::EOS);
            out.sort_unstable();
        }
        out
    }

    pub fn contains(&self, seq: &[TokenId]) -> bool {
        !seq.is_empty() && self.walk(seq).is_some_and(|n| self.is_terminal(n))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// The root and every node with children count as internal; terminal
    /// nodes count towards `leaf_count` whether or not they have children.
    pub fn stats(&self) -> Result<TrieStats> {
        if self.is_empty() {
            return Err(Error::EmptyTrie);
        }
        let terminal_only = self
            .nodes
            .iter()
            .skip(1)
            .filter(|n| n.terminal && n.children.is_empty())
            .count();
        Ok(TrieStats {
            leaf_count: self.leaf_count,
            internal_node_count: self.nodes.len() - terminal_only,
        })
    }

    /// All stored sequences in ascending lexicographic order.
    pub fn sequences(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::with_capacity(self.leaf_count);
        let mut path = Vec::new();
        self.collect(self.root(), &mut path, &mut out);
        out
    }

    fn collect(&self, node: NodeId, path: &mut Vec<TokenId>, out: &mut Vec<Vec<TokenId>>) {
        let n = &self.nodes[node.0 as usize];
        if n.terminal {
            out.push(path.clone());
        }
        for &(tok, child) in &n.children {
            path.push(tok);
            self.collect(child, path, out);
            path.pop();
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        // Record sizes are known up front, so offsets come from a preorder size pass.
        let order = self.preorder();
        let mut offsets = vec![0u64; self.nodes.len()];
        let mut pos = HEADER_LEN as u64;
        for &id in &order {
            offsets[id] = pos;
            pos += 5 + 12 * self.nodes[id].children.len() as u64;
        }
        let mut buf = Vec::with_capacity(pos as usize);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&self.vocab_size.to_le_bytes());
        for &id in &order {
            let node = &self.nodes[id];
            buf.push(node.terminal as u8);
            buf.extend_from_slice(&(node.children.len() as u32).to_le_bytes());
            for &(tok, child) in &node.children {
                buf.extend_from_slice(&tok.0.to_le_bytes());
                buf.extend_from_slice(&offsets[child.0 as usize].to_le_bytes());
            }
        }
        buf
    }

    fn preorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            order.push(id);
            for &(_, child) in self.nodes[id].children.iter().rev() {
                stack.push(child.0 as usize);
            }
        }
        order
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        let fmt_err = |msg: String| Error::TrieFormat(msg);
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(fmt_err("bad magic".into()));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let vocab_size = r.u32()?;

        // First pass: read records sequentially, remembering where each starts.
        let mut starts = Vec::new();
        let mut raw: Vec<(bool, Vec<(u32, u64)>)> = Vec::new();
        while r.pos < bytes.len() {
            starts.push(r.pos as u64);
            let terminal = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(fmt_err(format!("bad terminal flag {b}"))),
            };
            let n = r.u32()? as usize;
            if n > (bytes.len() - r.pos) / 12 {
                return Err(fmt_err("truncated stream".into()));
            }
            let mut kids = Vec::with_capacity(n);
            for _ in 0..n {
                kids.push((r.u32()?, r.u64()?));
            }
            raw.push((terminal, kids));
        }
        if raw.is_empty() {
            return Err(fmt_err("truncated stream: no root record".into()));
        }

        let mut nodes = Vec::with_capacity(raw.len());
        let mut referenced = vec![false; raw.len()];
        let mut leaf_count = 0;
        for (idx, (terminal, kids)) in raw.into_iter().enumerate() {
            let mut children = Vec::with_capacity(kids.len());
            let mut prev: Option<u32> = None;
            for (tok, off) in kids {
                if prev.is_some_and(|p| p >= tok) {
                    return Err(fmt_err("child tokens not strictly ascending".into()));
                }
                prev = Some(tok);
                if tok >= vocab_size || tok == TokenId::EOS.0 || tok == TokenId::SOS.0 {
                    return Err(fmt_err(format!("invalid child token {tok}")));
                }
                let child = starts
                    .binary_search(&off)
                    .map_err(|_| fmt_err(format!("dangling child offset {off}")))?;
                // Preorder puts every child after its parent, which also rules out cycles.
                if child <= idx || referenced[child] {
                    return Err(fmt_err(format!("child offset {off} does not form a tree")));
                }
                referenced[child] = true;
                children.push((TokenId(tok), NodeId(child as u32)));
            }
            if terminal {
                leaf_count += 1;
            }
            nodes.push(Node { children, terminal });
        }
        if referenced.iter().skip(1).any(|r| !r) {
            return Err(fmt_err("unreachable node record".into()));
        }
        if nodes
            .iter()
            .skip(1)
            .any(|n| !n.terminal && n.children.is_empty())
        {
            return Err(fmt_err("non-root node that ends no sequence".into()));
        }
        if nodes[0].terminal {
            return Err(fmt_err("root cannot be terminal".into()));
        }
        Ok(Self {
            nodes,
            vocab_size,
            leaf_count,
        })
    }

    fn structurally_equal(&self, a: NodeId, other: &Self, b: NodeId) -> bool {
        let (na, nb) = (&self.nodes[a.0 as usize], &other.nodes[b.0 as usize]);
        na.terminal == nb.terminal
            && na.children.len() == nb.children.len()
            && na
                .children
                .iter()
                .zip(&nb.children)
                .all(|(&(ta, ca), &(tb, cb))| ta == tb && self.structurally_equal(ca, other, cb))
    }
}

impl PartialEq for EntityTrie {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.leaf_count == other.leaf_count
            && self.nodes.len() == other.nodes.len()
            && self.structurally_equal(self.root(), other, other.root())
    }
}

impl Eq for EntityTrie {}

impl fmt::Debug for EntityTrie {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EntityTrie")
            .field("vocab_size", &self.vocab_size)
            .field("nodes", &self.nodes.len())
            .field("leaves", &self.leaf_count)
            .finish()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::TrieFormat("truncated stream".into()))?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}
