//! Dependency trees, shortest dependency paths and the SDP-based relation
//! detector (SARD).
//!
//! Trees are read from CoNLL-U. Only the ID, FORM, UPOS, HEAD and DEPREL
//! columns are used; multiword-token ranges (`1-2`) and empty nodes (`1.1`)
//! are skipped. Every block must carry a `# sent_id = <id>` comment.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, Span};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepNode {
    pub form: String,
    pub upos: String,
    /// Index of the head token; `None` for the root.
    pub head: Option<usize>,
    pub deprel: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepTree {
    pub sentence_id: String,
    nodes: Vec<DepNode>,
    root: usize,
}

impl DepTree {
    /// Builds a tree, checking for a single root, in-range heads and acyclicity.
    pub fn new(sentence_id: impl Into<String>, nodes: Vec<DepNode>) -> Result<Self> {
        let sentence_id = sentence_id.into();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(h) = node.head {
                if h >= nodes.len() || h == i {
                    return Err(Error::Invalid(format!(
                        "sentence {sentence_id}: token {i} has invalid head {h}"
                    )));
                }
            }
        }
        // Every chain of heads must reach the root within n steps.
        for start in 0..nodes.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = nodes[cur].head {
                cur = h;
                steps += 1;
                if steps > nodes.len() {
                    return Err(Error::CyclicHeads(sentence_id));
                }
            }
        }
        let roots: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].head.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::RootCount {
                id: sentence_id,
                found: roots.len(),
            });
        }
        Ok(DepTree {
            sentence_id,
            nodes,
            root: roots[0],
        })
    }

    /// Convenience constructor from parallel `(upos, head)` lists where the
    /// head is 1-based with 0 for the root, as in CoNLL-U.
    pub fn from_heads(sentence_id: &str, upos: &[&str], heads: &[usize]) -> Result<Self> {
        assert_eq!(upos.len(), heads.len());
        let nodes = upos
            .iter()
            .zip(heads)
            .enumerate()
            .map(|(i, (u, &h))| DepNode {
                form: format!("w{i}"),
                upos: u.to_string(),
                head: h.checked_sub(1),
                deprel: if h == 0 { "root".into() } else { "dep".into() },
            })
            .collect();
        DepTree::new(sentence_id, nodes)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[DepNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn head(&self, i: usize) -> Option<usize> {
        self.nodes[i].head
    }

    fn ancestors(&self, i: usize) -> Vec<usize> {
        let mut chain = vec![i];
        let mut cur = i;
        while let Some(h) = self.nodes[cur].head {
            chain.push(h);
            cur = h;
        }
        chain
    }

    /// Syntactic head of a span: the leftmost token whose head lies outside it.
    pub fn anchor(&self, span: Span) -> Result<usize> {
        if !span.fits(self.len()) {
            return Err(Error::Invalid(format!(
                "sentence {}: span {span} outside {} tokens",
                self.sentence_id,
                self.len()
            )));
        }
        span.indices()
            .find(|&i| self.nodes[i].head.is_none_or(|h| !span.contains(h)))
            .ok_or_else(|| {
                Error::Invalid(format!("sentence {}: no anchor in span {span}", self.sentence_id))
            })
    }
}

/// Parses every `# sent_id` block of a CoNLL-U file.
pub fn load_conllu(path: &Path) -> Result<BTreeMap<String, DepTree>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_conllu(BufReader::new(file), &path.display().to_string())
}

pub fn read_conllu<R: BufRead>(reader: R, source_name: &str) -> Result<BTreeMap<String, DepTree>> {
    struct Block {
        id: Option<String>,
        start_line: usize,
        rows: Vec<(usize, usize, DepNodeRaw)>,
    }
    struct DepNodeRaw {
        form: String,
        upos: String,
        head: usize,
        deprel: String,
    }

    fn finish(block: Block, source_name: &str, trees: &mut BTreeMap<String, DepTree>) -> Result<()> {
        if block.rows.is_empty() {
            return Ok(());
        }
        let id = block
            .id
            .ok_or_else(|| Error::malformed(source_name, block.start_line, "missing sentence id"))?;
        let n = block.rows.len();
        let mut nodes = Vec::with_capacity(n);
        for (expected, (line, tok_id, raw)) in block.rows.into_iter().enumerate() {
            if tok_id != expected + 1 {
                return Err(Error::malformed(
                    source_name,
                    line,
                    format!("token id {tok_id} out of sequence"),
                ));
            }
            if raw.head > n {
                return Err(Error::malformed(source_name, line, format!("head {} out of range", raw.head)));
            }
            nodes.push(DepNode {
                form: raw.form,
                upos: raw.upos,
                head: raw.head.checked_sub(1),
                deprel: raw.deprel,
            });
        }
        if trees.contains_key(&id) {
            return Err(Error::malformed(
                source_name,
                block.start_line,
                Error::DuplicateSentence(id),
            ));
        }
        let tree = DepTree::new(id.clone(), nodes)
            .map_err(|e| Error::malformed(source_name, block.start_line, e))?;
        trees.insert(id, tree);
        Ok(())
    }

    let mut trees = BTreeMap::new();
    let mut block = Block { id: None, start_line: 1, rows: Vec::new() };
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::malformed(source_name, line_no, e))?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            let done = std::mem::replace(&mut block, Block { id: None, start_line: line_no + 1, rows: Vec::new() });
            finish(done, source_name, &mut trees)?;
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "sent_id" {
                    block.id = Some(value.trim().to_string());
                }
            }
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::malformed(
                source_name,
                line_no,
                format!("expected 10 tab-separated columns, found {}", cols.len()),
            ));
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let tok_id: usize = cols[0]
            .parse()
            .map_err(|_| Error::malformed(source_name, line_no, format!("bad token id {:?}", cols[0])))?;
        let head: usize = cols[6]
            .parse()
            .map_err(|_| Error::malformed(source_name, line_no, format!("bad head {:?}", cols[6])))?;
        block.rows.push((
            line_no,
            tok_id,
            DepNodeRaw {
                form: cols[1].to_string(),
                upos: cols[3].to_string(),
                head,
                deprel: cols[7].to_string(),
            },
        ));
    }
    finish(block, source_name, &mut trees)?;
    Ok(trees)
}

/// Checks that every corpus record has a tree with a matching token count.
pub fn check_against_corpus(trees: &BTreeMap<String, DepTree>, corpus: &Corpus) -> Result<()> {
    for rec in corpus.records() {
        let tree = trees.get(&rec.id).ok_or_else(|| Error::MissingRecord(rec.id.clone()))?;
        if tree.len() != rec.tokens.len() {
            return Err(Error::Invalid(format!(
                "sentence {}: parse has {} tokens, corpus has {}",
                rec.id,
                tree.len(),
                rec.tokens.len()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdpResult {
    /// Token indices from the e1 anchor to the e2 anchor.
    pub path: Vec<usize>,
    /// Relation label of each traversed arc (`path.len() - 1` entries).
    pub deprels: Vec<String>,
    pub upos_seq: Vec<String>,
}

/// Unique path between the two entity anchors in the undirected tree.
pub fn shortest_dependency_path(tree: &DepTree, e1: Span, e2: Span) -> Result<SdpResult> {
    if e1.overlaps(&e2) {
        return Err(Error::Invalid(format!(
            "sentence {}: entity spans {e1} and {e2} are not disjoint",
            tree.sentence_id
        )));
    }
    let a = tree.anchor(e1)?;
    let b = tree.anchor(e2)?;
    let up_a = tree.ancestors(a);
    let up_b = tree.ancestors(b);
    // Both chains end at the root; strip the common suffix to find the meeting node.
    let mut common = 0;
    while common < up_a.len().min(up_b.len())
        && up_a[up_a.len() - 1 - common] == up_b[up_b.len() - 1 - common]
    {
        common += 1;
    }
    let lca_pos_a = up_a.len() - common;
    let lca_pos_b = up_b.len() - common;
    let mut path: Vec<usize> = up_a[..=lca_pos_a].to_vec();
    path.extend(up_b[..lca_pos_b].iter().rev());

    let deprels = path
        .windows(2)
        .map(|w| {
            let (u, v) = (w[0], w[1]);
            let dependent = if tree.head(u) == Some(v) { u } else { v };
            tree.nodes[dependent].deprel.clone()
        })
        .collect();
    let upos_seq = path.iter().map(|&i| tree.nodes[i].upos.clone()).collect();
    Ok(SdpResult { path, deprels, upos_seq })
}

/// True iff a token of one span has its head inside the other span.
pub fn check_direct_link(tree: &DepTree, e1: Span, e2: Span) -> bool {
    let heads_into = |from: Span, to: Span| {
        from.indices()
            .filter(|&i| i < tree.len())
            .any(|i| tree.head(i).is_some_and(|h| to.contains(h)))
    };
    heads_into(e1, e2) || heads_into(e2, e1)
}

pub const VERB: &str = "VERB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Assumption {
    /// Root is on the path and is a verb.
    RootVerb = 1,
    /// Root is on the path.
    RootWord = 2,
    /// Some path token is a verb.
    Verb = 3,
}

impl Assumption {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Assumption::RootVerb),
            2 => Ok(Assumption::RootWord),
            3 => Ok(Assumption::Verb),
            _ => Err(Error::Argument(format!("assumption id must be 1, 2 or 3, got {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heuristic {
    /// Assumption or direct link.
    AssumptionOrLink = 1,
    /// As above, and no conjunction inside the path.
    NoConjunction = 2,
}

impl Heuristic {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Heuristic::AssumptionOrLink),
            2 => Ok(Heuristic::NoConjunction),
            _ => Err(Error::Argument(format!("heuristic id must be 1 or 2, got {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

/// How conjunctions on the path are recognised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConjMode {
    /// Interior path tokens tagged CCONJ or SCONJ.
    #[default]
    Upos,
    /// Any traversed arc labelled `conj`.
    Deprel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SardConfig {
    pub assumption: Assumption,
    pub heuristic: Heuristic,
    pub conj_mode: ConjMode,
}

impl SardConfig {
    pub fn new(a_id: u8, h_id: u8) -> Result<Self> {
        Ok(SardConfig {
            assumption: Assumption::from_id(a_id)?,
            heuristic: Heuristic::from_id(h_id)?,
            conj_mode: ConjMode::Upos,
        })
    }

    pub fn with_conj_mode(mut self, mode: ConjMode) -> Self {
        self.conj_mode = mode;
        self
    }
}

pub fn check_assumption(assumption: Assumption, sdp: &SdpResult, tree: &DepTree) -> bool {
    let root = tree.root();
    let root_on_path = sdp.path.contains(&root);
    match assumption {
        Assumption::RootVerb => root_on_path && tree.nodes[root].upos == VERB,
        Assumption::RootWord => root_on_path,
        Assumption::Verb => sdp.upos_seq.iter().any(|u| u == VERB),
    }
}

/// Integer-id form of [`check_assumption`].
pub fn check_assumption_id(a_id: u8, sdp: &SdpResult, tree: &DepTree) -> Result<bool> {
    Ok(check_assumption(Assumption::from_id(a_id)?, sdp, tree))
}

pub fn has_conjunction(sdp: &SdpResult, mode: ConjMode) -> bool {
    match mode {
        ConjMode::Upos => {
            let n = sdp.upos_seq.len();
            n > 2 && sdp.upos_seq[1..n - 1].iter().any(|u| u == "CCONJ" || u == "SCONJ")
        }
        ConjMode::Deprel => sdp.deprels.iter().any(|d| d == "conj" || d.starts_with("conj:")),
    }
}

pub fn sard_predict(tree: &DepTree, e1: Span, e2: Span, cfg: &SardConfig) -> Result<Label> {
    let sdp = shortest_dependency_path(tree, e1, e2)?;
    let direct = check_direct_link(tree, e1, e2);
    let holds = check_assumption(cfg.assumption, &sdp, tree);
    if !holds && !direct {
        return Ok(Label::Negative);
    }
    Ok(match cfg.heuristic {
        Heuristic::AssumptionOrLink => Label::Positive,
        Heuristic::NoConjunction => Label::from_sign(!has_conjunction(&sdp, cfg.conj_mode)),
    })
}

/// Runs SARD over every record; parses must cover all corpus ids.
pub fn sard_predict_corpus(
    trees: &BTreeMap<String, DepTree>,
    corpus: &Corpus,
    cfg: &SardConfig,
) -> Result<Vec<Label>> {
    use rayon::prelude::*;
    corpus
        .records()
        .par_iter()
        .map(|rec| {
            let tree = trees.get(&rec.id).ok_or_else(|| Error::MissingRecord(rec.id.clone()))?;
            sard_predict(tree, rec.e1, rec.e2, cfg)
        })
        .collect()
}
