// scratch probe for budget tuning; removed before release
use std::time::Instant;

use clustersum_core::corpus::{build_corpus, Split, Vocab};
use clustersum_core::discriminator::{train_discriminator, DiscConfig};
use clustersum_core::eval::auc;
use clustersum_core::optim::TrainConfig;
use clustersum_core::synthetic::{generate, records, SyntheticConfig};

fn main() {
    let cfg = SyntheticConfig { n_docs: 200, ..SyntheticConfig::default() };
    let train_docs = generate(&cfg, 1, "train");
    let test_docs = generate(&SyntheticConfig { n_docs: 50, ..cfg.clone() }, 2, "test");
    let all_records: Vec<_> =
        records(&train_docs).into_iter().chain(records(&test_docs)).collect();
    let vocab = Vocab::build(&all_records, 256).unwrap();
    println!("vocab size {}", vocab.len());
    let train_corpus = build_corpus(&records(&train_docs), &vocab, Split::Train, 256).unwrap();
    let test_corpus = build_corpus(&records(&test_docs), &vocab, Split::Test, 256).unwrap();

    // minimal task: two short sentences, marker in one
    let mini_cfg = SyntheticConfig {
        n_docs: 60,
        min_sentences: 2,
        max_sentences: 2,
        min_words: 3,
        max_words: 4,
        salient_fraction: 0.5,
        n_fillers: 10,
        n_topics: 4,
    };
    let mini_train_docs = generate(&mini_cfg, 3, "mt");
    let mini_test_docs = generate(&mini_cfg, 4, "ms");
    let mini_records: Vec<_> =
        records(&mini_train_docs).into_iter().chain(records(&mini_test_docs)).collect();
    let mini_vocab = Vocab::build(&mini_records, 256).unwrap();
    let mini_train =
        build_corpus(&records(&mini_train_docs), &mini_vocab, Split::Train, 256).unwrap();
    let mini_test =
        build_corpus(&records(&mini_test_docs), &mini_vocab, Split::Test, 256).unwrap();
    for (lr, epochs) in [(3e-3, 10), (1e-2, 10)] {
        let train =
            TrainConfig { lr, epochs, seed: 7, dropout: 0.0, ..TrainConfig::default() };
        let t0 = Instant::now();
        let disc = train_discriminator(&mini_train, &DiscConfig::default(), mini_vocab.len(), 0.5, &train)
            .unwrap();
        let mut scored = Vec::new();
        for (doc, truth) in
            mini_test.documents.iter().zip(mini_test_docs.iter().map(|d| &d.salient))
        {
            for (s, &t) in disc.score_sentences(doc).unwrap().iter().zip(truth.iter()) {
                scored.push((*s, t));
            }
        }
        println!(
            "MINI lr={lr} epochs={epochs}: {:.1?}, loss {:.4}->{:.4}, AUC={:.4}",
            t0.elapsed(),
            disc.loss_history[0],
            disc.loss_history.last().unwrap(),
            auc(&scored)
        );
    }

    for (n_sent, words, lr, epochs) in [
        (3usize, (4usize, 5usize), 3e-3, 15usize),
        (4, (4, 6), 3e-3, 15),
        (5, (5, 7), 3e-3, 30),
    ] {
        let cfg = SyntheticConfig {
            n_docs: 200,
            min_sentences: n_sent.saturating_sub(1).max(2),
            max_sentences: n_sent + 1,
            min_words: words.0,
            max_words: words.1,
            ..SyntheticConfig::default()
        };
        let tr_docs = generate(&cfg, 1, "train");
        let te_docs = generate(&SyntheticConfig { n_docs: 50, ..cfg.clone() }, 2, "test");
        let recs: Vec<_> = records(&tr_docs).into_iter().chain(records(&te_docs)).collect();
        let vocab = Vocab::build(&recs, 256).unwrap();
        let tr = build_corpus(&records(&tr_docs), &vocab, Split::Train, 256).unwrap();
        let te = build_corpus(&records(&te_docs), &vocab, Split::Test, 256).unwrap();
        let train = TrainConfig { lr, epochs, seed: 7, dropout: 0.0, ..TrainConfig::default() };
        let t0 = Instant::now();
        let disc =
            train_discriminator(&tr, &DiscConfig::default(), vocab.len(), 0.5, &train).unwrap();
        let mut scored = Vec::new();
        for (doc, truth) in te.documents.iter().zip(te_docs.iter().map(|d| &d.salient)) {
            for (s, &t) in disc.score_sentences(doc).unwrap().iter().zip(truth.iter()) {
                scored.push((*s, t));
            }
        }
        println!(
            "sent~{n_sent} words{words:?} lr={lr} epochs={epochs}: {:.1?}, loss {:.4}->{:.4}, AUC={:.4}",
            t0.elapsed(),
            disc.loss_history[0],
            disc.loss_history.last().unwrap(),
            auc(&scored)
        );
    }
}
