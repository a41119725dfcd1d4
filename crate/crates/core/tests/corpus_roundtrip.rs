use std::io::Cursor;

use event_retriever::corpus::{ArticleImages, Corpus, CorpusError};
use event_retriever::synthetic::{generate, SyntheticSpec};

#[test]
fn thousand_article_corpus_round_trips() {
    let f = generate(&SyntheticSpec::default());
    assert_eq!(f.corpus.article_count(), 1000);
    let mut buf = Vec::new();
    f.corpus.write_jsonl(&mut buf).unwrap();
    let back = Corpus::from_reader(Cursor::new(&buf)).unwrap();
    assert_eq!(back.articles(), f.corpus.articles());
    assert_eq!(back.images(), f.corpus.images());
    for a in back.articles() {
        assert_eq!(
            back.article_images(&a.article_id).unwrap(),
            a.image_ids.as_slice()
        );
        for img in &a.image_ids {
            assert_eq!(back.image(img).unwrap().owner_article_id, a.article_id);
        }
    }
    let mut again = Vec::new();
    back.write_jsonl(&mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn ingest_from_disk_reports_line_of_bad_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    std::fs::write(
        &path,
        "{\"article_id\":\"a\",\"title\":\"t\",\"pub_date\":\"\",\"content\":\"c\",\"images\":[]}\nnot json\n",
    )
    .unwrap();
    assert!(matches!(
        Corpus::ingest(&path),
        Err(CorpusError::Malformed { line: 2, .. })
    ));
}

#[test]
fn image_without_uri_is_missing() {
    let line =
        r#"{"article_id":"a","title":"t","pub_date":"","content":"c","images":[{"image_id":"i"}]}"#;
    assert!(matches!(
        Corpus::from_reader(Cursor::new(line)),
        Err(CorpusError::MissingImage { .. })
    ));
}
