//! Instruction-free prompt layout: one `t:[s,relation,o]` line per retrieved
//! fact in time order, followed by the open query `t_q:[s_q,relation_q,`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, Quadruple, Query, RelationId, Time};

/// relation id -> surface string over the (possibly augmented) vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationLexicon {
    names: Vec<String>,
}

fn check_name(id: u32, name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Lexicon {
            id,
            msg: "empty surface string".into(),
        });
    }
    if let Some(c) = name.chars().find(|c| matches!(c, '[' | ']' | ',' | '\n' | '\r')) {
        return Err(Error::Lexicon {
            id,
            msg: format!("forbidden character {c:?} in {name:?}"),
        });
    }
    Ok(())
}

impl RelationLexicon {
    /// Base names; spaces become underscores. With `with_inverse` the
    /// vocabulary is extended by `inv_<name>` for ids `|R|..2|R|`.
    pub fn new(base: Vec<String>, with_inverse: bool) -> Result<Self> {
        let mut names: Vec<String> = base.into_iter().map(|s| s.trim().replace(' ', "_")).collect();
        for (i, n) in names.iter().enumerate() {
            check_name(i as u32, n)?;
        }
        if with_inverse {
            let inv: Vec<String> = names.iter().map(|n| format!("inv_{n}")).collect();
            names.extend(inv);
        }
        Ok(Self { names })
    }

    /// Placeholder names `rel_<id>` for datasets without a relation table.
    pub fn numbered(relation_count: u32, with_inverse: bool) -> Self {
        let base = (0..relation_count).map(|i| format!("rel_{i}")).collect();
        Self::new(base, with_inverse).expect("numbered names are valid")
    }

    /// Two-column TSV `relation_id  surface_string`; ids must cover `0..relation_count`.
    pub fn load_tsv(path: &Path, relation_count: u32, with_inverse: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map: HashMap<u32, String> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, name) = line.split_once('\t').ok_or_else(|| Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: "expected `id<TAB>name`".into(),
            })?;
            let id: u32 = id.trim().parse().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("non-integer relation id {id:?}"),
            })?;
            map.insert(id, name.to_string());
        }
        let base = (0..relation_count)
            .map(|i| map.remove(&i).ok_or(Error::LexiconMiss(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(base, with_inverse)
    }

    pub fn name(&self, r: RelationId) -> Result<&str> {
        self.names
            .get(r as usize)
            .map(String::as_str)
            .ok_or(Error::LexiconMiss(r))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Render fact lines as `t:[(s,r,o)]` instead of `t:[s,r,o]`.
    pub fact_parens: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptDoc {
    pub text: String,
    /// Byte offset where the open query fragment starts.
    pub query_suffix_offset: usize,
    pub fact_count: usize,
}

impl PromptDoc {
    pub fn query_suffix(&self) -> &str {
        &self.text[self.query_suffix_offset..]
    }
}

pub fn render_prompt(
    facts: &[Quadruple],
    query: &Query,
    lexicon: &RelationLexicon,
    config: PromptConfig,
) -> Result<PromptDoc> {
    let mut text = String::with_capacity(facts.len() * 24 + 24);
    for f in facts {
        debug_assert!(f.time < query.time, "prompt fact not before query");
        let r = lexicon.name(f.relation)?;
        if config.fact_parens {
            text.push_str(&format!("{}:[({},{},{})]\n", f.time, f.subject, r, f.object));
        } else {
            text.push_str(&format!("{}:[{},{},{}]\n", f.time, f.subject, r, f.object));
        }
    }
    let query_suffix_offset = text.len();
    text.push_str(&format!(
        "{}:[{},{},",
        query.time,
        query.subject,
        lexicon.name(query.relation)?
    ));
    Ok(PromptDoc {
        text,
        query_suffix_offset,
        fact_count: facts.len(),
    })
}

/// A parsed fact line: (time, subject, relation text, object).
pub type ParsedFact = (Time, EntityId, String, EntityId);

/// Parses a rendered prompt back into its fact lines and the open query
/// `(time, subject, relation text)`.
pub fn parse_prompt(text: &str) -> Option<(Vec<ParsedFact>, (Time, EntityId, String))> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    let query = lines.pop()?;
    let mut facts = Vec::with_capacity(lines.len());
    for line in lines {
        let (t, rest) = line.split_once(":[")?;
        let inner = rest.strip_suffix(']')?;
        let inner = inner
            .strip_prefix('(')
            .and_then(|s| s.strip_suffix(')'))
            .unwrap_or(inner);
        let mut parts = inner.split(',');
        let s = parts.next()?.parse().ok()?;
        let r = parts.next()?.to_string();
        let o = parts.next()?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        facts.push((t.parse().ok()?, s, r, o));
    }
    let (t, rest) = query.split_once(":[")?;
    let rest = rest.strip_suffix(',')?;
    let (s, r) = rest.split_once(',')?;
    Some((facts, (t.parse().ok()?, s.parse().ok()?, r.to_string())))
}
