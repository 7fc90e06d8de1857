use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pretokenize, TokenId, TokenizerError, TokenizerModel};

/// Outcome counters for one BPE training run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeTrainStats {
    pub requested_merges: usize,
    pub learned_merges: usize,
    /// Vocabulary entries added beyond the byte alphabet and specials. Can be
    /// lower than `learned_merges` when two merges spell the same string.
    pub new_vocab_entries: usize,
    /// Set when the corpus ran out of adjacent pairs before the target.
    pub exhausted: bool,
}

type Pair = (TokenId, TokenId);

struct Word {
    ids: Vec<TokenId>,
    freq: i64,
}

impl Word {
    fn pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.ids.windows(2).map(|w| (w[0], w[1]))
    }

    fn apply(&mut self, pair: Pair, merged: TokenId) -> bool {
        let mut changed = false;
        let mut out = Vec::with_capacity(self.ids.len());
        let mut i = 0;
        while i < self.ids.len() {
            if i + 1 < self.ids.len() && self.ids[i] == pair.0 && self.ids[i + 1] == pair.1 {
                out.push(merged);
                i += 2;
                changed = true;
            } else {
                out.push(self.ids[i]);
                i += 1;
            }
        }
        self.ids = out;
        changed
    }
}

/// Learns up to `target_merges` merge rules from `corpus`.
///
/// Pairs are counted within whitespace-led pieces. The most frequent adjacent
/// pair wins; ties go to the lexicographically smallest `(left, right)` byte
/// strings. Counts are updated incrementally but always equal a full recount.
pub fn train_bpe(corpus: &str, target_merges: usize) -> Result<(TokenizerModel, BpeTrainStats), TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let base = TokenizerModel::byte_level();
    let mut tokens = base.tokens().to_vec();
    let special = base.special();
    let mut lookup: HashMap<Vec<u8>, TokenId> = (0..=255u8).map(|b| (vec![b], b as TokenId)).collect();

    let mut freqs: BTreeMap<&str, i64> = BTreeMap::new();
    for piece in pretokenize(corpus) {
        *freqs.entry(piece).or_default() += 1;
    }
    let mut words: Vec<Word> = freqs
        .into_iter()
        .map(|(piece, freq)| Word {
            ids: piece.bytes().map(|b| b as TokenId).collect(),
            freq,
        })
        .collect();

    let (mut counts, mut locations) = words
        .par_iter()
        .enumerate()
        .fold(
            || (HashMap::<Pair, i64>::new(), HashMap::<Pair, HashSet<usize>>::new()),
            |(mut counts, mut locs), (wi, word)| {
                for p in word.pairs() {
                    *counts.entry(p).or_default() += word.freq;
                    locs.entry(p).or_default().insert(wi);
                }
                (counts, locs)
            },
        )
        .reduce(
            || (HashMap::new(), HashMap::new()),
            |(mut c1, mut l1), (c2, l2)| {
                for (p, c) in c2 {
                    *c1.entry(p).or_default() += c;
                }
                for (p, set) in l2 {
                    l1.entry(p).or_default().extend(set);
                }
                (c1, l1)
            },
        );

    let mut merges = Vec::with_capacity(target_merges);
    while merges.len() < target_merges {
        let best = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller byte strings rank higher
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some(pair) = best else { break };

        let mut joined = tokens[pair.0 as usize].clone();
        joined.extend_from_slice(&tokens[pair.1 as usize]);
        let merged = match lookup.get(&joined) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as TokenId;
                tokens.push(joined.clone());
                lookup.insert(joined, id);
                id
            }
        };
        merges.push(pair);

        let mut affected: Vec<usize> = locations
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for wi in affected {
            let word = &mut words[wi];
            let before: Vec<Pair> = word.pairs().collect();
            if !word.apply(pair, merged) {
                continue;
            }
            for p in before {
                let c = counts.get_mut(&p).expect("counted pair");
                *c -= word.freq;
            }
            for p in word.pairs() {
                *counts.entry(p).or_default() += word.freq;
                locations.entry(p).or_default().insert(wi);
            }
        }
        counts.retain(|_, c| *c > 0);
    }

    let learned = merges.len();
    let exhausted = learned < target_merges;
    if exhausted {
        log::warn!("corpus supports only {learned} of {target_merges} requested merges");
    }
    let stats = BpeTrainStats {
        requested_merges: target_merges,
        learned_merges: learned,
        new_vocab_entries: tokens.len() - base.vocab_size(),
        exhausted,
    };
    let model = TokenizerModel::from_parts(tokens, merges, special)?;
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type Pair = (Vec<u8>, Vec<u8>);

    /// Rescans every adjacent pair of every piece after each merge.
    fn oracle_merges(corpus: &str, n: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
        let mut words: Vec<Vec<Vec<u8>>> = pretokenize(corpus)
            .into_iter()
            .map(|w| w.bytes().map(|b| vec![b]).collect())
            .collect();
        let mut out = Vec::new();
        for _ in 0..n {
            let mut counts: Vec<(Pair, usize)> = Vec::new();
            for w in &words {
                for i in 0..w.len().saturating_sub(1) {
                    let key = (w[i].clone(), w[i + 1].clone());
                    match counts.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((key, 1)),
                    }
                }
            }
            let Some(max) = counts.iter().map(|(_, c)| *c).max() else {
                break;
            };
            let best = counts
                .iter()
                .filter(|(_, c)| *c == max)
                .map(|(k, _)| k.clone())
                .min()
                .unwrap();
            for w in words.iter_mut() {
                let mut next = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == best.0 && w[i + 1] == best.1 {
                        next.push([w[i].clone(), w[i + 1].clone()].concat());
                        i += 2;
                    } else {
                        next.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = next;
            }
            out.push(best);
        }
        out
    }

    fn merge_strings(tok: &TokenizerModel) -> Vec<(Vec<u8>, Vec<u8>)> {
        tok.merges()
            .iter()
            .map(|&(l, r)| {
                (
                    tok.token_bytes(l).unwrap().to_vec(),
                    tok.token_bytes(r).unwrap().to_vec(),
                )
            })
            .collect()
    }

    #[test]
    fn abab_single_merge() {
        let (tok, stats) = train_bpe("abab abab", 1).unwrap();
        assert_eq!(merge_strings(&tok), vec![(b"a".to_vec(), b"b".to_vec())]);
        assert!(tok.token_id(b"ab").is_some());
        assert_eq!(stats.learned_merges, 1);
        assert_eq!(oracle_merges("abab abab", 1), merge_strings(&tok));
    }

    #[test]
    fn zero_merges_is_byte_level() {
        let (tok, stats) = train_bpe("anything at all", 0).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok, TokenizerModel::byte_level());
        assert!(!stats.exhausted);
    }

    #[test]
    fn second_merge_recounted() {
        let corpus = "aaabdaaabac";
        let (tok, _) = train_bpe(corpus, 2).unwrap();
        let oracle = oracle_merges(corpus, 2);
        // (a,a) occurs 4 times before any merge
        assert_eq!(oracle[0], (b"a".to_vec(), b"a".to_vec()));
        assert_eq!(merge_strings(&tok), oracle);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(train_bpe("", 3), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn exhaustion_is_flagged_not_failed() {
        let (tok, stats) = train_bpe("ab", 5).unwrap();
        assert_eq!(tok.merges().len(), 1);
        assert!(stats.exhausted);
        assert_eq!(stats.requested_merges, 5);
    }

    #[test]
    fn deterministic_serialization() {
        let corpus = "the quick brown fox jumps over the lazy dog. روباه قهوه‌ای سریع";
        let a = train_bpe(corpus, 30).unwrap().0.to_json_string();
        let b = train_bpe(corpus, 30).unwrap().0.to_json_string();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matches_rescan_oracle(corpus in "[abc ]{1,120}", n in 0usize..20) {
            prop_assume!(!corpus.is_empty());
            let (tok, _) = train_bpe(&corpus, n).unwrap();
            prop_assert_eq!(merge_strings(&tok), oracle_merges(&corpus, n));
        }

        #[test]
        fn roundtrip_after_training(corpus in "\\PC{1,80}", text in "\\PC{0,80}", n in 0usize..30) {
            let (tok, _) = train_bpe(&corpus, n).unwrap();
            prop_assert_eq!(tok.decode(&tok.encode(&text)).unwrap(), text);
        }

        #[test]
        fn more_merges_never_lengthen(corpus in "[ab سلام]{1,100}", text in "[ab سلام]{0,60}", n in 0usize..15) {
            let (small, _) = train_bpe(&corpus, n).unwrap();
            let (large, _) = train_bpe(&corpus, n + 5).unwrap();
            prop_assert!(large.encode(&text).len() <= small.encode(&text).len());
        }
    }
}
