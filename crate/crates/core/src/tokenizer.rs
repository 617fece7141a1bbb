//! WordPiece vocabulary training, encoding and decoding.
//!
//! Training starts from the character inventory of the corpus (word-initial
//! characters bare, word-internal characters with the `##` prefix) and
//! greedily merges the adjacent pair with the highest
//! `freq(pair) / (freq(left) * freq(right))` until the vocabulary is full.
//! Ties go to the lexicographically smallest merged string. If the corpus
//! runs out of mergeable pairs first, the remaining slots are filled with
//! `[unusedN]` placeholders so the vocabulary always has the requested size.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const CONTINUATION_PREFIX: &str = "##";

const MAX_WORD_CHARS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || ('\u{2000}'..='\u{206F}').contains(&c)
        || ('\u{3000}'..='\u{303F}').contains(&c)
        || matches!(c, '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}')
}

/// Lowercases, splits on whitespace and isolates punctuation characters as
/// their own words.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if is_punctuation(c) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

fn word_units(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION_PREFIX}{c}") })
        .collect()
}

fn merged_string(left: &str, right: &str) -> String {
    let tail = right.strip_prefix(CONTINUATION_PREFIX).unwrap_or(right);
    format!("{left}{tail}")
}

/// Trains a vocabulary of exactly `vocab_size` entries.
///
/// The merge procedure has no random choices, so `seed` does not change the
/// result; it is accepted for interface stability with the other trainers.
pub fn train_wordpiece<I, S>(corpus: I, vocab_size: usize, _seed: u64) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut docs = 0usize;
    for doc in corpus {
        docs += 1;
        for w in pre_tokenize(doc.as_ref()) {
            if w.chars().count() <= MAX_WORD_CHARS {
                *word_counts.entry(w).or_default() += 1;
            }
        }
    }
    if docs == 0 || word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let alphabet: BTreeSet<String> = word_counts.keys().flat_map(|w| word_units(w)).collect();
    let required = NUM_SPECIAL + alphabet.len();
    if vocab_size < required {
        return Err(Error::VocabSizeTooSmall { requested: vocab_size, required });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut ids: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();

    // Sorted for deterministic iteration.
    let mut words: Vec<(Vec<u32>, u64)> = {
        let mut entries: Vec<_> = word_counts.into_iter().collect();
        entries.sort();
        entries.into_iter().map(|(w, c)| (word_units(&w).iter().map(|u| ids[u]).collect(), c)).collect()
    };

    while tokens.len() < vocab_size {
        let mut unit_freq: HashMap<u32, u64> = HashMap::new();
        let mut pair_freq: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, count) in &words {
            for &s in syms {
                *unit_freq.entry(s).or_default() += count;
            }
            for pair in syms.windows(2) {
                *pair_freq.entry((pair[0], pair[1])).or_default() += count;
            }
        }
        if pair_freq.is_empty() {
            break;
        }
        let mut best: Option<((u32, u32), u64, u128, String)> = None;
        for (&(l, r), &f) in &pair_freq {
            let denom = unit_freq[&l] as u128 * unit_freq[&r] as u128;
            let replace = match &best {
                None => true,
                Some((_, bf, bd, bs)) => {
                    // f / denom vs bf / bd without rounding
                    let lhs = f as u128 * bd;
                    let rhs = *bf as u128 * denom;
                    lhs > rhs || (lhs == rhs && merged_string(&tokens[l as usize], &tokens[r as usize]) < *bs)
                }
            };
            if replace {
                best = Some(((l, r), f, denom, merged_string(&tokens[l as usize], &tokens[r as usize])));
            }
        }
        let ((l, r), _, _, merged) = best.expect("nonempty pair table");
        let new_id = match ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                ids.insert(merged.clone(), id);
                tokens.push(merged);
                id
            }
        };
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }

    let mut unused = 0usize;
    while tokens.len() < vocab_size {
        let t = format!("[unused{unused}]");
        unused += 1;
        if !ids.contains_key(&t) {
            ids.insert(t.clone(), tokens.len() as u32);
            tokens.push(t);
        }
    }
    Vocab::from_tokens(tokens)
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list, validating the
    /// special-token layout and uniqueness.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL {
            return Err(Error::VocabSizeTooSmall { requested: tokens.len(), required: NUM_SPECIAL });
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::InvalidConfig(format!("vocab id {i} must be {s}, found {:?}", tokens[i])));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t == CONTINUATION_PREFIX {
                return Err(Error::InvalidConfig(format!("vocab id {i} is an empty token")));
            }
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::DuplicateId(t.clone()));
            }
        }
        Ok(Self { tokens, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Subword ids of `text` without `[CLS]`/`[SEP]`.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in pre_tokenize(text) {
            self.tokenize_word(&word, &mut out);
        }
        out
    }

    fn tokenize_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(UNK);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        let mut piece = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION_PREFIX);
                }
                piece.extend(&chars[start..end]);
                if let Some(id) = self.id(&piece) {
                    if !is_special(id) {
                        found = Some((id, end));
                        break;
                    }
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(UNK);
                    return;
                }
            }
        }
    }

    /// `[CLS] subwords [SEP]`, truncated to at most `max_len` ids with
    /// `[SEP]` kept last.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        let body = self.tokenize(text);
        wrap_single(&body, max_len)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::IdOutOfRange { id: id as usize, size: self.len() })?;
            if is_special(id) {
                continue;
            }
            match tok.strip_prefix(CONTINUATION_PREFIX) {
                Some(tail) => out.push_str(tail),
                None => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        Ok(out)
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// `[CLS] body [SEP]` truncated to `max_len`.
pub fn wrap_single(body: &[TokenId], max_len: usize) -> Vec<TokenId> {
    if max_len < 2 {
        return vec![SEP; max_len.min(1)];
    }
    let keep = body.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    ids.extend_from_slice(&body[..keep]);
    ids.push(SEP);
    ids
}

/// `[CLS] query [SEP] doc [SEP]` with segment ids, truncating the document
/// first and then the query so the pair fits in `max_len` (at least 3).
pub fn wrap_pair(query: &[TokenId], doc: &[TokenId], max_len: usize) -> (Vec<TokenId>, Vec<u8>) {
    let budget = max_len.saturating_sub(3);
    let q_keep = query.len().min(budget);
    let d_keep = doc.len().min(budget - q_keep);
    let mut ids = Vec::with_capacity(q_keep + d_keep + 3);
    ids.push(CLS);
    ids.extend_from_slice(&query[..q_keep]);
    ids.push(SEP);
    let mut segments = vec![0u8; ids.len()];
    ids.extend_from_slice(&doc[..d_keep]);
    ids.push(SEP);
    segments.resize(ids.len(), 1);
    (ids, segments)
}
