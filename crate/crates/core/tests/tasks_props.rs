//! Synthetic task generators, tokenizer, sampling and splits, checked
//! against independent reimplementations.

use std::collections::BTreeSet;

use pha::tasks::{
    detokenize, dump_jsonl, generate_examples, held_out_cipher, load_jsonl, reference_suite, sample_multitask_batch,
    split_few_shot, tokenize, Example, Family, TaskSpec, BOS, CHARSET, EOS, PAD,
};
use pha::PhaError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Written without looking at `TaskSpec::apply`.
fn oracle(family: Family, alphabet: &str, shift: usize, input: &str) -> String {
    match family {
        Family::Copy => input.to_owned(),
        Family::Reverse => {
            let mut v: Vec<u8> = input.bytes().collect();
            v.reverse();
            String::from_utf8(v).unwrap()
        }
        Family::Sort => {
            let mut v: Vec<u8> = input.bytes().collect();
            v.sort();
            String::from_utf8(v).unwrap()
        }
        Family::ShiftCipher => {
            let a = alphabet.as_bytes();
            input
                .bytes()
                .map(|c| {
                    let i = a.iter().position(|&x| x == c).unwrap();
                    a[(i + shift) % a.len()] as char
                })
                .collect()
        }
        Family::VowelMask => input.replace(['a', 'e', 'i', 'o', 'u'], "*"),
        Family::PairCompare => {
            let parts: Vec<&str> = input.split('=').collect();
            assert_eq!(parts.len(), 2);
            let (a, b) = (parts[0], parts[1]);
            if a < b {
                "<".into()
            } else if a == b {
                "=".into()
            } else {
                ">".into()
            }
        }
    }
}

#[test]
fn every_generated_example_obeys_its_rule() {
    let mut suite = reference_suite();
    suite.push(held_out_cipher());
    for (id, spec) in suite.iter().enumerate() {
        let examples = generate_examples(spec, id, 1000, 5).unwrap();
        for e in &examples {
            assert_eq!(e.task_id, id);
            assert_eq!((e.input[0], *e.input.last().unwrap()), (BOS, EOS));
            let input = detokenize(&e.input).unwrap();
            let target = detokenize(&e.target).unwrap();
            assert_eq!(target, oracle(spec.family, &spec.alphabet, spec.shift, &input), "{}", spec.name);
            let body: &str = if spec.family == Family::PairCompare {
                let (a, b) = input.split_once('=').unwrap();
                assert_eq!(a.len(), b.len());
                assert!(a.chars().chain(b.chars()).all(|c| spec.alphabet.contains(c)));
                a
            } else {
                assert!(input.chars().all(|c| spec.alphabet.contains(c)));
                &input
            };
            assert!((spec.min_len..=spec.max_len).contains(&body.len()), "{}: {input}", spec.name);
        }
    }
}

#[test]
fn pair_compare_produces_all_three_answers() {
    let spec = &reference_suite()[5];
    let ex = generate_examples(spec, 0, 500, 1).unwrap();
    let answers: BTreeSet<String> = ex.iter().map(|e| detokenize(&e.target).unwrap()).collect();
    assert_eq!(answers, ["<", "=", ">"].iter().map(|s| s.to_string()).collect());
}

#[test]
fn held_out_cipher_shares_alphabet_but_not_rule() {
    let reg = &reference_suite()[3];
    let held = held_out_cipher();
    assert_eq!((reg.family, held.family), (Family::ShiftCipher, Family::ShiftCipher));
    assert_eq!(reg.alphabet, held.alphabet);
    assert_ne!(reg.apply("012").unwrap(), held.apply("012").unwrap());
    assert!(!reference_suite().iter().any(|s| s.name == held.name));
}

#[test]
fn tokenizer_edges() {
    assert_eq!(tokenize("").unwrap(), vec![BOS, EOS]);
    assert!(matches!(tokenize("A"), Err(PhaError::Tokenize(_))));
    assert!(matches!(tokenize("a b"), Err(PhaError::Tokenize(_))));
    // Specials are skipped and decoding stops at the first EOS.
    let ids = [BOS, 3, PAD, 4, EOS, 5];
    assert_eq!(detokenize(&ids).unwrap(), "ab");
}

#[test]
fn invalid_specs_are_rejected() {
    let base = reference_suite()[0].clone();
    let bad = [
        TaskSpec { alphabet: String::new(), ..base.clone() },
        TaskSpec { alphabet: "aB".into(), ..base.clone() },
        TaskSpec { min_len: 0, ..base.clone() },
        TaskSpec { min_len: 6, max_len: 5, ..base.clone() },
        TaskSpec { max_len: 31, ..base.clone() },
        TaskSpec { family: Family::ShiftCipher, shift: 6, ..base.clone() },
    ];
    for s in bad {
        assert!(matches!(generate_examples(&s, 0, 1, 0), Err(PhaError::Config(_))), "{s:?}");
    }
    assert!(generate_examples(&base, 0, 0, 0).is_err());
}

proptest! {
    #[test]
    fn tokenize_round_trips(s in proptest::collection::vec(proptest::sample::select(CHARSET.chars().collect::<Vec<_>>()), 0..30)) {
        let text: String = s.into_iter().collect();
        let ids = tokenize(&text).unwrap();
        prop_assert_eq!(ids.len(), text.len() + 2);
        prop_assert_eq!(detokenize(&ids).unwrap(), text);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), which in 0usize..6) {
        let spec = &reference_suite()[which];
        let a = generate_examples(spec, which, 20, seed).unwrap();
        let b = generate_examples(spec, which, 20, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn few_shot_split_is_a_partition(seed in any::<u64>(), k in proptest::sample::select(vec![4usize, 16, 32])) {
        let data = generate_examples(&reference_suite()[3], 0, 200, 9).unwrap();
        let (support, rest) = split_few_shot(&data, k, seed).unwrap();
        prop_assert_eq!(support.len(), k);
        prop_assert_eq!(rest.len(), data.len() - k);
        // Identify examples by position: duplicates in content are possible.
        let pos = |e: &Example, used: &mut BTreeSet<usize>| {
            let i = (0..data.len()).find(|i| data[*i] == *e && !used.contains(i)).unwrap();
            used.insert(i);
        };
        let mut used = BTreeSet::new();
        for e in support.iter().chain(&rest) {
            pos(e, &mut used);
        }
        prop_assert_eq!(used.len(), data.len());
        let again = split_few_shot(&data, k, seed).unwrap();
        prop_assert_eq!(again, (support, rest));
    }
}

#[test]
fn split_rejects_impossible_shot_counts() {
    let data = generate_examples(&reference_suite()[0], 0, 10, 0).unwrap();
    assert!(split_few_shot(&data, 0, 0).is_err());
    assert!(split_few_shot(&data, 10, 0).is_err());
    assert!(split_few_shot(&data, 9, 0).is_ok());
}

/// Per-task counts in uniformly sampled batches stay within three standard
/// deviations of the binomial expectation.
#[test]
fn multitask_sampling_is_proportional() {
    let suite = reference_suite();
    let sizes = [100usize, 100, 100, 100, 100, 500];
    let data: Vec<Vec<Example>> = suite
        .iter()
        .enumerate()
        .map(|(i, s)| generate_examples(s, i, sizes[i], 0).unwrap())
        .collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (batches, bs) = (400, 32);
    let mut counts = [0usize; 6];
    for _ in 0..batches {
        let b = sample_multitask_batch(&data, bs, &mut rng).unwrap();
        assert_eq!(b.len(), bs);
        assert_eq!(b.counts.values().sum::<usize>(), bs);
        for (t, c) in b.counts {
            counts[t] += c;
        }
    }
    let n = (batches * bs) as f64;
    for (t, &c) in counts.iter().enumerate() {
        let p = sizes[t] as f64 / total as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n * p).abs() < 3.0 * sd, "task {t}: {c} vs {}", n * p);
    }
    assert!(sample_multitask_batch(&data, 1, &mut rng).is_err());
}

#[test]
fn batches_pad_and_shift_targets() {
    let spec = &reference_suite()[0];
    let ex = generate_examples(spec, 0, 8, 2).unwrap();
    let refs: Vec<&Example> = ex.iter().collect();
    let b = pha::tasks::TaskBatch::from_examples(&refs).unwrap();
    let t = b.tgt_in.ids.len() / b.len();
    for (i, e) in ex.iter().enumerate() {
        let row_in = &b.tgt_in.ids[i * t..(i + 1) * t];
        let row_lab = &b.labels[i * t..(i + 1) * t];
        let n = e.target.len() - 1;
        assert_eq!(&row_in[..n], &e.target[..n]);
        assert_eq!(&row_lab[..n], &e.target[1..]);
        assert!(row_lab[n..].iter().all(|&x| x == PAD));
    }
}

#[test]
fn jsonl_round_trip() {
    let names: Vec<String> = reference_suite().iter().map(|s| s.name.clone()).collect();
    let mut all = Vec::new();
    for (i, s) in reference_suite().iter().enumerate() {
        all.extend(generate_examples(s, i, 15, 4).unwrap());
    }
    let mut buf = Vec::new();
    dump_jsonl(&mut buf, &names, &all).unwrap();
    assert_eq!(buf.iter().filter(|&&c| c == b'\n').count(), all.len());
    let back = load_jsonl(&buf[..], &names).unwrap();
    assert_eq!(back, all);
    let bad = br#"{"task":"nope","input":"a","target":"a"}"#;
    assert!(load_jsonl(&bad[..], &names).is_err());
}
