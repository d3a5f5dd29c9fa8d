//! The 49-token syllable vocabulary used for sequence decoding: the CTC blank,
//! a silence/word separator, 23 pinyin initials and 24 pinyin finals.

pub const BLANK: usize = 0;
pub const SILENCE: usize = 1;

pub const INITIALS: [&str; 23] = [
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "zh", "ch", "sh", "r", "z", "c", "s", "y",
    "w",
];

pub const FINALS: [&str; 24] = [
    "a", "o", "e", "i", "u", "v", "ai", "ei", "ui", "ao", "ou", "iu", "ie", "ve", "er", "an", "en", "in", "un", "vn",
    "ang", "eng", "ing", "ong",
];

pub const VOCAB_SIZE: usize = 2 + INITIALS.len() + FINALS.len();

/// Ordered token names: `-` (blank), `|` (silence), initials, finals.
pub fn tokens() -> Vec<String> {
    ["-", "|"].into_iter().chain(INITIALS).chain(FINALS).map(str::to_string).collect()
}

pub fn initial(i: usize) -> usize {
    2 + i % INITIALS.len()
}

pub fn final_(i: usize) -> usize {
    2 + INITIALS.len() + i % FINALS.len()
}

/// Token id of a name, if it is in the vocabulary.
pub fn token_id(name: &str) -> Option<usize> {
    tokens().iter().position(|t| t == name)
}

/// Splits a run of finals (e.g. `ian` into `i`, `an`), preferring longer
/// finals first and backtracking when a choice leaves an unparsable tail.
fn split_finals(rest: &str) -> Option<Vec<usize>> {
    if rest.is_empty() {
        return Some(Vec::new());
    }
    let mut cands: Vec<(usize, &str)> =
        FINALS.iter().copied().enumerate().filter(|(_, f)| rest.starts_with(f)).collect();
    cands.sort_by_key(|(_, f)| std::cmp::Reverse(f.len()));
    cands.into_iter().find_map(|(i, f)| {
        let mut tail = split_finals(&rest[f.len()..])?;
        tail.insert(0, final_(i));
        Some(tail)
    })
}

/// Splits a syllable such as `dian` into an initial followed by one or more
/// finals (`d`, `i`, `an`). Syllables without an initial (e.g. `er`) yield
/// only finals.
pub fn split_syllable(syllable: &str) -> Option<Vec<usize>> {
    // two-letter initials first so that "zh" is not read as "z"
    let mut inits: Vec<(usize, &str)> = INITIALS.iter().copied().enumerate().collect();
    inits.sort_by_key(|(_, s)| std::cmp::Reverse(s.len()));
    for (i, ini) in inits {
        if let Some(rest) = syllable.strip_prefix(ini) {
            if let Some(mut fin) = split_finals(rest).filter(|f| !f.is_empty()) {
                fin.insert(0, initial(i));
                return Some(fin);
            }
        }
    }
    split_finals(syllable).filter(|f| !f.is_empty())
}

/// Token sequence of a word: syllables framed and separated by silence, so
/// `["dian", "nao"]` becomes `| d i an | n ao |`.
pub fn word_tokens(syllables: &[&str]) -> Option<Vec<usize>> {
    let mut out = vec![SILENCE];
    for s in syllables {
        out.extend(split_syllable(s)?);
        out.push(SILENCE);
    }
    Some(out)
}
