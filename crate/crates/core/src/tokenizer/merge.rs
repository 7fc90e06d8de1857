use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{TokenId, TokenizerError, TokenizerModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub base_size: usize,
    pub addon_size: usize,
    /// Addon tokens already present in the base (including the shared byte
    /// alphabet and the special tokens, which are matched by role).
    pub collisions: usize,
    pub combined_size: usize,
    pub new_token_ids: Range<TokenId>,
    pub base_merges: usize,
    pub appended_merges: usize,
    /// Addon merge rules dropped because their output already exists in base.
    pub skipped_merges: usize,
}

/// Appends every addon token missing from `base`, in addon order.
///
/// Base ids never move. Addon merge rules follow the base rules, except those
/// whose output token is already part of the base vocabulary.
pub fn merge_vocabularies(
    base: &TokenizerModel,
    addon: &TokenizerModel,
) -> Result<(TokenizerModel, MergeReport), TokenizerError> {
    if !base.has_byte_alphabet() {
        return Err(TokenizerError::IncompatibleAlphabets(
            "base lacks single-byte tokens".into(),
        ));
    }
    if !addon.has_byte_alphabet() {
        return Err(TokenizerError::IncompatibleAlphabets(
            "addon lacks single-byte tokens".into(),
        ));
    }

    let base_size = base.vocab_size();
    let mut tokens = base.tokens().to_vec();
    let mut lookup = base.lookup.clone();
    // addon id -> combined id
    let mut remap: Vec<TokenId> = Vec::with_capacity(addon.vocab_size());
    let mut collisions = 0;
    let addon_sp = addon.special();
    let base_sp = base.special();
    for (id, bytes) in addon.tokens().iter().enumerate() {
        let id = id as TokenId;
        let mapped = if addon_sp.contains(id) {
            collisions += 1;
            match id {
                _ if id == addon_sp.bos => base_sp.bos,
                _ if id == addon_sp.eos => base_sp.eos,
                _ if id == addon_sp.pad => base_sp.pad,
                _ => base_sp.unk,
            }
        } else if let Some(&existing) = lookup.get(bytes) {
            collisions += 1;
            existing
        } else {
            let new_id = tokens.len() as TokenId;
            tokens.push(bytes.clone());
            lookup.insert(bytes.clone(), new_id);
            new_id
        };
        remap.push(mapped);
    }

    let mut merges = base.merges().to_vec();
    let mut skipped = 0;
    for &(l, r) in addon.merges() {
        let (_, out) = addon.merge_ranks[&(l, r)];
        if (remap[out as usize] as usize) < base_size {
            skipped += 1;
            continue;
        }
        merges.push((remap[l as usize], remap[r as usize]));
    }
    let appended = merges.len() - base.merges().len();

    let combined_size = tokens.len();
    let report = MergeReport {
        base_size,
        addon_size: addon.vocab_size(),
        collisions,
        combined_size,
        new_token_ids: base_size as TokenId..combined_size as TokenId,
        base_merges: base.merges().len(),
        appended_merges: appended,
        skipped_merges: skipped,
    };
    debug_assert_eq!(combined_size, base_size + addon.vocab_size() - collisions);
    let combined = TokenizerModel::from_parts(tokens, merges, base_sp)?;
    Ok((combined, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_bpe, BYTE_ALPHABET};

    fn with_extra(extra: &[&str]) -> TokenizerModel {
        let base = TokenizerModel::byte_level();
        let mut tokens = base.tokens().to_vec();
        tokens.extend(extra.iter().map(|s| s.as_bytes().to_vec()));
        TokenizerModel::from_parts(tokens, vec![], base.special()).unwrap()
    }

    #[test]
    fn union_appends_missing_tokens() {
        let base = with_extra(&["xa", "xb", "xc"]);
        let addon = with_extra(&["xb", "xd"]);
        let (combined, report) = merge_vocabularies(&base, &addon).unwrap();
        let shared = BYTE_ALPHABET + 4;
        assert_eq!(report.collisions, shared + 1);
        assert_eq!(report.combined_size, base.vocab_size() + 1);
        assert_eq!(combined.token_id(b"xd"), Some(base.vocab_size() as TokenId));
        assert_eq!(
            report.new_token_ids,
            base.vocab_size() as u32..base.vocab_size() as u32 + 1
        );
    }

    #[test]
    fn subset_addon_adds_nothing() {
        let base = with_extra(&["xa", "xb", "xc"]);
        let addon = with_extra(&["xc", "xa"]);
        let (combined, report) = merge_vocabularies(&base, &addon).unwrap();
        assert_eq!(report.combined_size, report.base_size);
        assert_eq!(report.collisions, report.addon_size);
        assert_eq!(combined, base);
    }

    #[test]
    fn base_ids_and_merges_preserved() {
        let (base, _) = train_bpe("the cat sat on the mat with the hat", 10).unwrap();
        let (addon, _) = train_bpe("گربه روی فرش نشست و گربه خوابید", 10).unwrap();
        let (combined, report) = merge_vocabularies(&base, &addon).unwrap();
        for id in 0..base.vocab_size() as TokenId {
            assert_eq!(combined.token_bytes(id), base.token_bytes(id));
        }
        assert_eq!(&combined.merges()[..base.merges().len()], base.merges());
        assert_eq!(
            report.combined_size,
            report.base_size + report.addon_size - report.collisions
        );
        let text = "گربه روی فرش the cat";
        assert_eq!(combined.decode(&combined.encode(text)).unwrap(), text);
        assert!(combined.encode("گربه").len() < base.encode("گربه").len());
    }

    #[test]
    fn addon_rule_with_base_output_is_skipped() {
        let (base, _) = train_bpe("ab ab ab", 1).unwrap();
        let (addon, _) = train_bpe("ab ab ab cd cd", 2).unwrap();
        let (combined, report) = merge_vocabularies(&base, &addon).unwrap();
        assert_eq!(report.skipped_merges, 1);
        assert_eq!(combined.merges().len(), 2);
    }

    #[test]
    fn incompatible_alphabet_detected() {
        let base = TokenizerModel::byte_level();
        let mut addon = base.clone();
        // strip byte 0x00 by renaming it
        addon.tokens[0] = b"zz".to_vec();
        addon.lookup.remove(&vec![0u8]);
        addon.lookup.insert(b"zz".to_vec(), 0);
        assert!(matches!(
            merge_vocabularies(&base, &addon),
            Err(TokenizerError::IncompatibleAlphabets(_))
        ));
    }
}
