use super::*;
use crate::evaluation::mrr_at_k;
use crate::index::{RankedList, Run};

fn p() -> PathBuf {
    PathBuf::from("f")
}

#[test]
fn parse_examples() {
    let c = Collection::parse_tsv("7\thello world\n8\t\n", &p()).unwrap();
    assert_eq!(c.get("7"), Some("hello world"));
    assert_eq!(c.get("8"), Some(""));
    assert_eq!(c.position("8"), Some(1));
    let q = parse_qrels("3 0 7 1\n3 0 8 0\n", &p()).unwrap();
    assert_eq!(q.grade("3", "7"), 1);
    assert_eq!(q.len(), 2);
}

#[test]
fn malformed_lines_report_line_numbers() {
    let err = Collection::parse_tsv("1\tok\nno tab here\n", &p());
    assert!(matches!(err, Err(Error::MalformedLine { line: 2, .. })), "{err:?}");
    assert!(matches!(Collection::parse_tsv("1\ta\n1\tb\n", &p()), Err(Error::DuplicateId(_))));
    assert!(matches!(Collection::parse_tsv("\ta\n", &p()), Err(Error::MalformedLine { line: 1, .. })));
    assert!(matches!(parse_qrels("3 0 7\n", &p()), Err(Error::MalformedLine { line: 1, .. })));
    assert!(matches!(parse_qrels("3 0 7 -1\n", &p()), Err(Error::MalformedLine { .. })));
    assert!(matches!(parse_qrels("3 0 7 1\n3 0 7 0\n", &p()), Err(Error::DuplicateId(_))));
    assert!(matches!(Triplets::parse_tsv("q\td1\n", &p()), Err(Error::MalformedLine { line: 1, .. })));
    assert!(matches!(Triplets::parse_tsv("q\td1\td1,d2\n", &p()), Err(Error::MalformedLine { .. })));
}

#[test]
fn referential_integrity() {
    let docs = Collection::parse_tsv("d1\ta\nd2\tb\n", &p()).unwrap();
    let queries = Collection::parse_tsv("q\tx\n", &p()).unwrap();
    let good = Triplets::parse_tsv("q\td1\td2\n", &p()).unwrap();
    assert!(good.check(&queries, &docs).is_ok());
    let missing = Triplets::parse_tsv("q\td1\td9\n", &p()).unwrap();
    assert!(matches!(missing.check(&queries, &docs), Err(Error::DanglingReference { kind: "document", .. })));
    let no_query = Triplets::parse_tsv("z\td1\td2\n", &p()).unwrap();
    assert!(matches!(no_query.check(&queries, &docs), Err(Error::DanglingReference { kind: "query", .. })));
    let qrels = parse_qrels("q 0 d3 1\n", &p()).unwrap();
    assert!(matches!(check_qrels(&qrels, &queries, &docs), Err(Error::DanglingReference { .. })));
}

#[test]
fn round_trips() {
    let data = generate_synthetic(&SyntheticSpec { num_docs: 60, num_queries: 6, num_test_queries: 3, num_topics: 3, ..SyntheticSpec::default() }).unwrap();
    let c = Collection::parse_tsv(&data.collection.to_tsv(), &p()).unwrap();
    assert_eq!(c, data.collection);
    assert_eq!(parse_qrels(&qrels_to_string(&data.qrels), &p()).unwrap(), data.qrels);
    assert_eq!(Triplets::parse_tsv(&data.triplets.to_tsv(), &p()).unwrap(), data.triplets);

    let dir = tempfile::tempdir().unwrap();
    let paths = data.write_to(dir.path()).unwrap();
    assert_eq!(load_collection(&paths[0]).unwrap(), data.collection);
    assert_eq!(load_queries(&paths[1]).unwrap(), data.train_queries);
    assert_eq!(load_queries(&paths[2]).unwrap(), data.test_queries);
    assert_eq!(load_qrels(&paths[3]).unwrap(), data.qrels);
    assert_eq!(load_triplets(&paths[4]).unwrap(), data.triplets);
}

#[test]
fn default_task_has_expected_shape() {
    let spec = SyntheticSpec::default();
    let data = generate_synthetic(&spec).unwrap();
    assert_eq!(data.collection.len(), 1000);
    assert_eq!((data.train_queries.len(), data.test_queries.len()), (100, 50));
    for qid in data.train_queries.ids().iter().chain(data.test_queries.ids()) {
        let judged = data.qrels.judged(qid).unwrap();
        assert!(judged.values().any(|&g| g >= 1));
        // documents outside the topic serve as negatives
        assert!(data.collection.len() - judged.len() >= spec.negatives_per_query);
    }
    assert_eq!(data.triplets.len(), 100 * spec.triplets_per_query);
    let all_queries = {
        let mut c = data.train_queries.clone();
        for (id, t) in data.test_queries.iter() {
            c.insert(id, t).unwrap();
        }
        c
    };
    data.triplets.check(&all_queries, &data.collection).unwrap();
    check_qrels(&data.qrels, &all_queries, &data.collection).unwrap();
    for t in &data.triplets.records {
        assert_eq!(t.negatives.len(), spec.negatives_per_query);
        assert_eq!(data.qrels.grade(&t.query_id, &t.positive), 1);
        assert!(t.negatives.iter().all(|n| data.qrels.grade(&t.query_id, n) == 0));
    }
    // topics are disjoint keyword sets
    let mut all: Vec<&String> = data.keywords.iter().flatten().collect();
    let n = all.len();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), n);
}

#[test]
fn qrels_follow_planted_topics() {
    let spec = SyntheticSpec { seed: 9, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec).unwrap();
    let topic_of = data.keyword_topics();
    for (qs, topics) in [(&data.train_queries, &data.train_topics), (&data.test_queries, &data.test_topics)] {
        for ((qid, text), &t) in qs.iter().zip(topics) {
            // the query's keywords name its topic
            let named: BTreeSet<usize> = text.split_whitespace().filter_map(|w| topic_of.get(w).copied()).collect();
            assert_eq!(named, BTreeSet::from([t]));
            for (d, &dt) in data.doc_topics.iter().enumerate() {
                assert_eq!(data.qrels.grade(qid, &data.collection.ids()[d]), u32::from(dt == t));
            }
        }
    }
}

#[test]
fn single_topic_makes_everything_relevant() {
    let spec = SyntheticSpec { num_topics: 1, num_docs: 30, num_queries: 4, num_test_queries: 2, negatives_per_query: 3, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec).unwrap();
    for qid in data.train_queries.ids().iter().chain(data.test_queries.ids()) {
        assert_eq!(data.qrels.judged(qid).unwrap().len(), 30);
    }
}

#[test]
fn generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate_synthetic(&SyntheticSpec::default()).unwrap().write_to(dir.path().join("a")).unwrap();
    let b = generate_synthetic(&SyntheticSpec::default()).unwrap().write_to(dir.path().join("b")).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let other = generate_synthetic(&SyntheticSpec { seed: 43, ..SyntheticSpec::default() }).unwrap();
    assert_ne!(other.collection.to_tsv(), fs::read_to_string(&a[0]).unwrap());
}

#[test]
fn keyword_overlap_oracle_solves_the_task() {
    let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let run: Run = data
        .test_queries
        .iter()
        .map(|(qid, text)| {
            let hits = keyword_overlap_ranking(&data, text, 10)
                .into_iter()
                .enumerate()
                .map(|(r, d)| (data.collection.ids()[d].clone(), -(r as f64)))
                .collect();
            (qid.to_string(), RankedList { query_id: qid.to_string(), hits })
        })
        .collect();
    let mrr = mrr_at_k(&run, &data.qrels, 10).unwrap().aggregate;
    assert!(mrr >= 0.95, "oracle MRR@10 {mrr}");
}

#[test]
fn synthetic_spec_validation() {
    assert!(SyntheticSpec::default().validate().is_ok());
    assert!(SyntheticSpec { negatives_per_query: 0, ..SyntheticSpec::default() }.validate().is_err());
    assert!(SyntheticSpec { num_docs: 5, ..SyntheticSpec::default() }.validate().is_err());
    assert!(SyntheticSpec { doc_len_range: (9, 3), ..SyntheticSpec::default() }.validate().is_err());
    let json = r#"{"num_docs": 10, "num_topics": 2, "bogus": 1}"#;
    assert!(serde_json::from_str::<SyntheticSpec>(json).is_err());
    let json = r#"{"num_docs": 40, "num_topics": 2}"#;
    let s: SyntheticSpec = serde_json::from_str(json).unwrap();
    assert_eq!((s.num_docs, s.num_queries), (40, 100));
}
