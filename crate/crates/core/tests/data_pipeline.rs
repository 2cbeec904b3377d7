//! Packing round-trips over many random corpora and token-file ingestion.

use proptest::prelude::*;
use stabilitylab::data::{unpack_documents, CorpusSpec, DocumentStream, Packer, Split, EOS_ID};

#[test]
fn pack_roundtrip_over_100_random_corpora() {
    for seed in 0..100u64 {
        let spec = CorpusSpec {
            seed,
            vocab_size: 64 + (seed as usize % 192),
            transition_temperature: 0.3 + (seed as f64) * 0.01,
            ..CorpusSpec::default()
        };
        let mut reference = DocumentStream::open(&spec, Split::Train).unwrap();
        let mut expected = Vec::new();
        for _ in 0..12 {
            expected.push(reference.next_doc().unwrap());
        }

        let b = 1 + (seed as usize % 4);
        let t = 8 + (seed as usize % 24);
        let mut packer = Packer::new(DocumentStream::open(&spec, Split::Train).unwrap(), b, t);
        let mut stream = Vec::new();
        for _ in 0..6 {
            let batch = packer.next_batch().unwrap();
            assert_eq!(batch.tokens.len(), b * t);
            // no padding: every slot is content or the eos separator, and
            // every id is in vocabulary
            assert!(batch.tokens.iter().all(|&id| id < spec.vocab_size));
            assert!(batch.targets.iter().all(|&id| id < spec.vocab_size));
            stream.extend(batch.tokens);
        }
        // boundaries recovered exactly by splitting on eos
        let docs = unpack_documents(&stream);
        assert!(!docs.is_empty());
        for (got, want) in docs.iter().take(docs.len() - 1).zip(&expected) {
            assert_eq!(got, want, "seed {seed}");
        }
    }
}

#[test]
fn emitted_token_count_is_block_multiple() {
    let spec = CorpusSpec::default();
    let (b, t) = (3, 17);
    let mut packer = Packer::new(DocumentStream::open(&spec, Split::Train).unwrap(), b, t);
    let mut total = 0;
    for _ in 0..9 {
        total += packer.next_batch().unwrap().tokens.len();
    }
    assert_eq!(total % (b * t), 0);
}

#[test]
fn targets_are_stream_shifted_by_one() {
    let spec = CorpusSpec::default();
    let mut packer = Packer::new(DocumentStream::open(&spec, Split::Train).unwrap(), 2, 9);
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..5 {
        let batch = packer.next_batch().unwrap();
        assert_eq!(&batch.tokens[1..], &batch.targets[..batch.targets.len() - 1]);
        if let Some(p) = prev {
            // continuity across blocks
            assert_eq!(p.last().copied().unwrap(), batch.tokens[0]);
        }
        prev = Some(batch.targets.clone());
    }
}

#[test]
fn token_file_documents_and_packing() {
    let dir = tempfile::tempdir_in(std::env::temp_dir());
    let dir = match dir {
        Ok(d) => d,
        Err(_) => return,
    };
    let path = dir.path().join("tokens.txt");
    // three documents separated by eos
    let body = "5\n6\n7\n0\n8\n9\n0\n10\n0\n";
    std::fs::write(&path, body).unwrap();
    let spec = CorpusSpec {
        vocab_size: 16,
        eval_fraction: 0.0,
        ..CorpusSpec::token_file(path.clone())
    };
    let mut stream = DocumentStream::open(&spec, Split::Train).unwrap();
    let mut docs = Vec::new();
    while let Some(d) = stream.next_doc() {
        docs.push(d);
    }
    assert_eq!(docs.len(), 3);
    let mut all: Vec<Vec<usize>> = vec![vec![5, 6, 7], vec![8, 9], vec![10]];
    all.sort();
    let mut got = docs.clone();
    got.sort();
    assert_eq!(got, all);

    // finite stream: packing ends instead of padding
    let mut packer = Packer::new(DocumentStream::open(&spec, Split::Train).unwrap(), 1, 4);
    let mut blocks = 0;
    while packer.next_batch().is_some() {
        blocks += 1;
    }
    assert!(blocks <= 2);
}

proptest! {
    #[test]
    fn every_batch_stays_in_vocabulary(seed in 0u64..300, vocab in 8usize..64) {
        let spec = CorpusSpec { seed, vocab_size: vocab, ..CorpusSpec::default() };
        let mut packer = Packer::new(DocumentStream::open(&spec, Split::Train).unwrap(), 2, 12);
        for _ in 0..3 {
            let batch = packer.next_batch().unwrap();
            prop_assert!(batch.tokens.iter().all(|&id| id < vocab));
            prop_assert!(batch.targets.iter().all(|&id| id < vocab));
        }
    }

    #[test]
    fn packing_preserves_document_order(seed in 0u64..100) {
        let spec = CorpusSpec { seed, ..CorpusSpec::default() };
        let mut direct = DocumentStream::open(&spec, Split::Train).unwrap();
        let mut packer = Packer::new(DocumentStream::open(&spec, Split::Train).unwrap(), 1, 32);
        let mut packed = Vec::new();
        for _ in 0..4 {
            packed.extend(packer.next_batch().unwrap().tokens);
        }
        let docs = unpack_documents(&packed);
        for got in docs.iter().take(docs.len().saturating_sub(1)) {
            let want = direct.next_doc().unwrap();
            prop_assert_eq!(got, &want);
        }
    }
}

#[test]
fn eos_is_zero() {
    assert_eq!(EOS_ID, 0);
}
