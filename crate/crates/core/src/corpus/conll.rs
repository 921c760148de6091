// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use super::{EntitySample, Split};
use crate::error::{Error, Result};

/// Samples plus the recoverable issues met while parsing.
#[derive(Debug, Clone, Default)]
pub struct ConllParse {
    pub samples: Vec<EntitySample>,
    pub warnings: Vec<String>,
    pub n_sentences: usize,
}

/// Parses a CoNLL-2003 four-column file.
///
/// Sentences are rebuilt by joining tokens with single spaces and every
/// maximal `B-X`/`I-X` run becomes one sample. An `I-X` that does not continue
/// an `X` entity starts a new one and is reported as a warning.
/// `-DOCSTART-` lines are dropped.
pub fn parse_conll(path: &Path, split: Split) -> Result<ConllParse> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll_str(&text, split, &path.display().to_string())
}

pub fn parse_conll_str(text: &str, split: Split, origin: &str) -> Result<ConllParse> {
    let mut out = ConllParse::default();
    let mut sentence: Vec<(String, String, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            flush(&mut sentence, split, &mut out);
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols[0] == "-DOCSTART-" {
            flush(&mut sentence, split, &mut out);
            continue;
        }
        if cols.len() < 2 {
            return Err(Error::Corpus {
                path: origin.into(),
                line: lineno + 1,
                reason: "expected at least token and NER columns".into(),
            });
        }
        let tag = *cols.last().unwrap();
        if !(tag == "O" || tag.starts_with("B-") || tag.starts_with("I-")) {
            return Err(Error::Corpus {
                path: origin.into(),
                line: lineno + 1,
                reason: format!("invalid NER tag `{tag}`"),
            });
        }
        sentence.push((cols[0].to_string(), tag.to_string(), lineno + 1));
    }
    flush(&mut sentence, split, &mut out);
    Ok(out)
}

fn flush(sentence: &mut Vec<(String, String, usize)>, split: Split, out: &mut ConllParse) {
    if sentence.is_empty() {
        return;
    }
    let sent_idx = out.n_sentences;
    out.n_sentences += 1;

    let mut text = String::new();
    let mut starts = Vec::with_capacity(sentence.len());
    let mut char_pos = 0;
    for (i, (tok, _, _)) in sentence.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            char_pos += 1;
        }
        starts.push(char_pos);
        text.push_str(tok);
        char_pos += tok.chars().count();
    }

    // (category, first token, last token)
    let mut runs: Vec<(String, usize, usize)> = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, (_, tag, lineno)) in sentence.iter().enumerate() {
        if tag == "O" {
            if let Some((cat, s)) = open.take() {
                runs.push((cat, s, i - 1));
            }
            continue;
        }
        let (prefix, cat) = tag.split_at(2);
        let continues = prefix == "I-" && open.as_ref().is_some_and(|(c, _)| c == cat);
        if continues {
            continue;
        }
        if prefix == "I-" {
            out.warnings.push(format!(
                "line {lineno}: `{tag}` without a preceding {cat} entity, treated as B-{cat}"
            ));
        }
        if let Some((c, s)) = open.take() {
            runs.push((c, s, i - 1));
        }
        open = Some((cat.to_string(), i));
    }
    if let Some((cat, s)) = open.take() {
        runs.push((cat, s, sentence.len() - 1));
    }

    for (ent_idx, (cat, a, b)) in runs.into_iter().enumerate() {
        let start = starts[a];
        let end = starts[b] + sentence[b].0.chars().count();
        let mention: String = text.chars().skip(start).take(end - start).collect();
        out.samples.push(EntitySample {
            text: text.clone(),
            mention,
            char_span: (start, end),
            token_span: None,
            category: cat,
            split,
            sample_id: format!("{split}-{sent_idx}-{ent_idx}"),
        });
    }
    sentence.clear();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_bio_runs() {
        let src = "-DOCSTART- -X- -X- O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\nGerman JJ B-NP B-MISC\ncall NN I-NP O\n\n";
        let p = parse_conll_str(src, Split::Train, "mem").unwrap();
        assert_eq!(p.samples.len(), 2);
        assert_eq!(p.samples[0].mention, "EU");
        assert_eq!(p.samples[1].mention, "German");
        assert_eq!(p.samples[1].char_span, (11, 17));
        assert_eq!(p.samples[0].text, "EU rejects German call");
        assert_eq!(p.samples[1].category, "MISC");
        assert!(p.warnings.is_empty());
        for s in &p.samples {
            assert_eq!(s.span_text(), s.mention);
        }
    }

    #[test]
    fn all_o_sentence_gives_nothing() {
        let p = parse_conll_str("The DT B-NP O\ncat NN I-NP O\n", Split::Test, "mem").unwrap();
        assert!(p.samples.is_empty());
        assert_eq!(p.n_sentences, 1);
    }

    #[test]
    fn multi_token_and_adjacent_entities() {
        let src = "Peter NNP I-NP B-PER\nBlackburn NNP I-NP I-PER\nJohn NNP I-NP B-PER\nin IN I-PP O\nNew NNP I-NP B-LOC\nYork NNP I-NP I-LOC\n";
        let p = parse_conll_str(src, Split::Train, "mem").unwrap();
        let m: Vec<_> = p.samples.iter().map(|s| s.mention.as_str()).collect();
        assert_eq!(m, ["Peter Blackburn", "John", "New York"]);
    }

    #[test]
    fn orphan_inside_tag_recovers_with_warning() {
        let src = "in IN I-PP O\nParis NNP I-NP I-LOC\nand CC O O\nLyon NNP I-NP I-LOC\nFC NNP I-NP I-ORG\n";
        let p = parse_conll_str(src, Split::Train, "mem").unwrap();
        let m: Vec<_> = p.samples.iter().map(|s| s.mention.as_str()).collect();
        assert_eq!(m, ["Paris", "Lyon", "FC"]);
        assert_eq!(p.warnings.len(), 3);
    }

    #[test]
    fn bad_tag_is_an_error() {
        assert!(parse_conll_str("x X X Q-PER\n", Split::Train, "mem").is_err());
    }

    #[test]
    fn unreadable_file_is_an_error() {
        assert!(parse_conll(Path::new("/nonexistent/conll.txt"), Split::Train).is_err());
    }
}
