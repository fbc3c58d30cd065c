//! Acceptance checks; prints one PASS/FAIL/SKIP line per criterion.

mod common;

use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{call, MockUpstream};
use editgate::server::{router, AppState};
use editgate_core::augment::{Pipeline, EDITED_FILE, KEPT_FILE, ORIGINALS_FILE};
use editgate_core::editors::{DemoIndex, Editor, EditorConfig, EditorKind, Models};
use editgate_core::embedding::{EmbeddingProvider, HashEmbedder};
use editgate_core::harness::{compare_editors, run_memory_scaling, EvalConfig, EvalContext};
use editgate_core::memory::{EditMemory, KeyPolicy};
use editgate_core::metrics::{aggregate, pearson, tr, EvalScores, Metric, Scorer, SubstringNli};
use editgate_core::model::{HttpModel, Matcher, ModelRef, ModelRole, ScriptedModel, TextModel};
use editgate_core::templates::{render_ike, DemoLibrary};
use editgate_core::types::{parse_dataset_file, write_dataset_file};
use editgate_core::{Edit, Error, QueryRecord, QueryType, Scope};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;
type Check = Pin<Box<dyn Future<Output = Outcome>>>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(started: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    if took > limit {
        Err(format!("{what} took {took:?}, limit {limit:?}"))
    } else {
        Ok(())
    }
}

/// Straight-line transcription of the evaluation pseudo-code with its own
/// tokenizer, hashing and ROUGE-1.
mod oracle {
    use std::collections::BTreeMap;

    pub fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for ch in text.to_lowercase().chars() {
            if ch.is_alphanumeric() {
                cur.push(ch);
            } else if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    fn fnv(s: &str) -> u64 {
        let mut h: u64 = 14695981039346656037;
        for b in s.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        h
    }

    pub fn embed(text: &str) -> Vec<f64> {
        let mut v = vec![0.0f64; 384];
        for w in words(text) {
            v[(fnv(&w) % 384) as usize] += 1.0;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in v.iter_mut() {
                *x /= n;
            }
        }
        v
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            d / (na * nb)
        }
    }

    pub fn rouge(a: &str, b: &str) -> f64 {
        let wa = words(a);
        let wb = words(b);
        if wa.is_empty() || wb.is_empty() {
            return 0.0;
        }
        let mut ca: BTreeMap<&str, usize> = BTreeMap::new();
        let mut cb: BTreeMap<&str, usize> = BTreeMap::new();
        for w in &wa {
            *ca.entry(w).or_insert(0) += 1;
        }
        for w in &wb {
            *cb.entry(w).or_insert(0) += 1;
        }
        let overlap: usize = ca.iter().map(|(w, n)| (*n).min(*cb.get(w).unwrap_or(&0))).sum();
        if overlap == 0 {
            return 0.0;
        }
        let p = overlap as f64 / wa.len() as f64;
        let r = overlap as f64 / wb.len() as f64;
        2.0 * p * r / (p + r)
    }

    fn ind(b: bool) -> f64 {
        if b { 1.0 } else { 0.0 }
    }

    pub fn te(y_e: &str, ins: bool, o_old: &str, o_new: &str) -> f64 {
        let y_e = y_e.to_lowercase();
        let ctn_old = ind(y_e.contains(&o_old.to_lowercase()));
        let ctn_new = ind(y_e.contains(&o_new.to_lowercase()));
        if ins {
            0.5 * ctn_new + 0.5 * (1.0 - ctn_old)
        } else {
            0.5 * ctn_old + 0.5 * (1.0 - ctn_new)
        }
    }

    pub fn se(ins: bool, x: &str, y_e: &str, k_old: &str, k_new: &str, k_self: &str) -> f64 {
        let premise = format!("{x} {y_e}").to_lowercase();
        let entail = |h: &str| ind(premise.contains(&h.to_lowercase()));
        let ent_new = entail(k_new);
        if ins {
            0.5 * ent_new + 0.5 * (1.0 - entail(k_old))
        } else {
            0.5 * entail(k_self) + 0.5 * (1.0 - ent_new)
        }
    }

    fn pair(ins: bool, y_o: &str, y_e: &str, o_old: &str, o_new: &str) -> (String, String) {
        let (y_o, y_e) = (y_o.to_lowercase(), y_e.to_lowercase());
        if ins {
            (y_o.replace(&o_old.to_lowercase(), "mask"), y_e.replace(&o_new.to_lowercase(), "mask"))
        } else {
            (y_o, y_e)
        }
    }

    pub fn tr(ins: bool, y_o: &str, y_e: &str, o_old: &str, o_new: &str) -> f64 {
        let (a, b) = pair(ins, y_o, y_e, o_old, o_new);
        rouge(&a, &b)
    }

    pub fn sr(ins: bool, y_o: &str, y_e: &str, o_old: &str, o_new: &str) -> f64 {
        let (a, b) = pair(ins, y_o, y_e, o_old, o_new);
        cosine(&embed(&a), &embed(&b))
    }
}

const VOCAB: &[&str] = &[
    "the", "city", "of", "Paris", "Rome", "is", "capital", "French", "Italian", "was", "born", "in",
    "London", "Berlin", "a", "national", "team", "plays", "for", "Lisp", "JavaScript", "Europe",
    "Antarctica", "located", "café", "NASA", "!", ",", ".", "?", "-",
];
const OBJECTS: &[&str] = &["Paris", "Rome", "French", "Italian", "Lisp", "JavaScript", "Europe", "Antarctica", "FIFA"];

fn sentence(rng: &mut ChaCha8Rng, inserts: &[&str]) -> String {
    let n = rng.gen_range(0..10);
    let mut words: Vec<String> = (0..n).map(|_| VOCAB.choose(rng).unwrap().to_string()).collect();
    for s in inserts {
        if rng.gen_bool(0.5) {
            let at = rng.gen_range(0..=words.len());
            let s = if rng.gen_bool(0.3) { s.to_uppercase() } else { s.to_string() };
            words.insert(at, s);
        }
    }
    words.join(if rng.gen_bool(0.2) { "  " } else { " " })
}

async fn c1_metric_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let embedder = HashEmbedder::default();
    let scorer = Scorer { nli: &SubstringNli, embedder: &embedder };
    let cases = 400;
    for i in 0..cases {
        let old = *OBJECTS.choose(&mut rng).unwrap();
        let new = loop {
            let o = *OBJECTS.choose(&mut rng).unwrap();
            if o != old {
                break o;
            }
        };
        let prompt = format!("{}?", sentence(&mut rng, &[]).trim()).replace(">>", "").replace("||", "");
        let prompt = if prompt.trim() == "?" { "Where is it?".to_owned() } else { prompt };
        let edit = Edit::new(i, &prompt, old, new).map_err(|e| e.to_string())?;
        let qt = *QueryType::ALL.choose(&mut rng).unwrap();
        let query = sentence(&mut rng, &[]);
        let k_new_phrase = format!("{prompt} {new}");
        let k_old_phrase = format!("{prompt} {old}");
        let y_o = sentence(&mut rng, &[old]);
        let self_phrase = format!("{query} {y_o}");
        let y_e = if rng.gen_bool(0.15) {
            y_o.clone()
        } else {
            sentence(&mut rng, &[old, new, &k_new_phrase, &k_old_phrase, &self_phrase])
        };
        let got: EvalScores = scorer
            .score(&edit, qt, &query, &y_o, &y_e)
            .await
            .map_err(|e| e.to_string())?;
        let ins = qt.scope() == Scope::Ins;
        let want_te = oracle::te(&y_e, ins, old, new);
        let want_se = oracle::se(ins, &query, &y_e, &k_old_phrase, &k_new_phrase, &self_phrase);
        let want_tr = oracle::tr(ins, &y_o, &y_e, old, new);
        let want_sr = oracle::sr(ins, &y_o, &y_e, old, new);
        ensure!(got.te == want_te, "case {i}: TE {} != {want_te} for {y_e:?}", got.te);
        ensure!(got.se == want_se, "case {i}: SE {} != {want_se} for {query:?} / {y_e:?}", got.se);
        ensure!((got.tr - want_tr).abs() <= 1e-9, "case {i}: TR {} != {want_tr}", got.tr);
        ensure!((got.sr - want_sr).abs() <= 1e-9, "case {i}: SR {} != {want_sr}", got.sr);
    }
    within(started, Duration::from_secs(10), "oracle comparison")?;
    Ok(format!("{cases} randomized cases agree"))
}

/// (table, method, metric, [simple, rephrase, oos], printed avg)
#[rustfmt::skip]
const TABLE_CELLS: &[(&str, &str, [[f64; 4]; 4])] = &[
    ("CounterFact", "PROMPT", [[85.17, 86.73, 63.8, 78.57], [83.1, 84.57, 61.97, 76.54], [21.42, 21.54, 18.11, 20.36], [53.14, 54.86, 51.37, 53.13]]),
    ("CounterFact", "IKE", [[94.2, 85.8, 85.4, 88.47], [93.2, 84.5, 85.3, 87.67], [24.14, 18.98, 22.81, 21.97], [53.45, 48.94, 57.69, 53.36]]),
    ("CounterFact", "SERAC", [[95.4, 87.4, 96.1, 92.97], [94.6, 87.3, 96.2, 92.7], [35.66, 37.62, 96.01, 56.43], [65.51, 64.64, 97.04, 75.73]]),
    ("CounterFact", "SERAC (ChatGPT)", [[95.23, 85.8, 98.6, 93.2], [95.3, 86.0, 98.6, 93.31], [23.43, 26.71, 96.41, 48.85], [55.04, 56.88, 97.91, 69.95]]),
    ("CounterFact", "postEdit", [[96.8, 94.7, 99.4, 96.97], [92.5, 92.1, 99.4, 94.67], [88.65, 89.66, 99.64, 92.65], [93.9, 94.02, 99.82, 95.91]]),
    ("zsRE", "PROMPT", [[88.83, 86.87, 58.37, 78.02], [86.5, 84.97, 60.27, 77.24], [47.76, 45.35, 34.93, 42.68], [73.4, 74.62, 61.29, 69.77]]),
    ("zsRE", "IKE", [[98.1, 97.6, 78.0, 91.23], [97.7, 94.7, 83.1, 91.83], [19.72, 16.36, 27.83, 21.3], [42.26, 38.67, 58.53, 46.49]]),
    ("zsRE", "SERAC", [[98.7, 95.1, 100.0, 97.93], [97.6, 93.3, 100.0, 96.97], [68.02, 66.06, 100.0, 78.03], [86.84, 85.91, 100.0, 90.92]]),
    ("zsRE", "SERAC (ChatGPT)", [[94.7, 87.5, 100.0, 94.07], [96.17, 88.53, 100.0, 94.9], [52.22, 52.01, 100.0, 68.08], [75.2, 77.56, 100.0, 84.25]]),
    ("zsRE", "postEdit", [[98.4, 98.6, 100.0, 99.0], [96.2, 95.4, 100.0, 97.2], [95.76, 96.13, 100.0, 97.3], [97.69, 97.89, 100.0, 98.53]]),
];

async fn c2_table_arithmetic() -> Outcome {
    let started = Instant::now();
    let mut checked = 0;
    for (table, method, cells) in TABLE_CELLS {
        let records: Vec<(QueryType, EvalScores)> = QueryType::ALL
            .iter()
            .enumerate()
            .map(|(t, &qt)| {
                let s = |m: usize| cells[m][t] / 100.0;
                (qt, EvalScores { te: s(0), se: s(1), tr: s(2), sr: s(3) })
            })
            .collect();
        let report = aggregate(&records).map_err(|e| e.to_string())?;
        for (m, metric) in Metric::ALL.iter().enumerate() {
            let avg = report.row(*metric).avg.ok_or("missing AVG")?;
            let printed = cells[m][3];
            // 1e-9 absorbs binary representation error at the 0.01 boundary.
            ensure!(
                (avg - printed).abs() <= 0.01 + 1e-9,
                "{table} {method} {}: derived {avg} vs printed {printed}",
                metric.as_str()
            );
            checked += 1;
        }
    }
    within(started, Duration::from_secs(1), "table arithmetic")?;
    Ok(format!("{checked} AVG cells reproduced"))
}

struct Case {
    prompt: &'static str,
    old: &'static str,
    new: &'static str,
    query: &'static str,
    original: &'static str,
    ike: &'static str,
    postedit: &'static str,
}

const CASES: &[Case] = &[
    Case {
        prompt: "The nationality of Marcel Maupi was what?",
        old: "French",
        new: "Italian",
        query: "What was Marcel Maupi's nationality?",
        original: "Marcel Maupi was a French national.",
        ike: "Italian.",
        postedit: "Marcel Maupi was an Italian national.",
    },
    Case {
        prompt: "Football Association of Malaysia is affiliated with the",
        old: "FIFA",
        new: "Avengers",
        query: "Football Association of Malaysia is affiliated with _",
        original: "- Asian Football Confederation (AFC)\n- FIFA (Fédération Internationale de Football Association)",
        ike: "Avengers.",
        postedit: "- Asian Football Confederation (AFC)\n- Avengers",
    },
    Case {
        prompt: "What is the programming language for CLPython?",
        old: "Lisp",
        new: "JavaScript",
        query: "What is the programming language for CLPython?",
        original: "CLPython is an implementation of Python language in Common Lisp, which means that the programming language used for CLPython is Common Lisp.",
        ike: "JavaScript.",
        postedit: "CLPython is an implementation of Python language in JavaScript,which means that the programming language used for CLPython is JavaScript.",
    },
    Case {
        prompt: "Howard Glacier is located in",
        old: "Antarctica",
        new: "Europe",
        query: "Howard Glacier is located in the continent _",
        original: "of Antarctica. Specifically, it is located in the northern part of the Antarctic Peninsula.",
        ike: "Europe.",
        postedit: "of Europe. Specifically, it is located in the northern part of the continent.",
    },
    Case {
        prompt: "In what city or state did the formation of I Am Kloot occur?",
        old: "Manchester",
        new: "Bilbao",
        query: "In which city or state was the formation of I Am Kloot?",
        original: "I Am Kloot was formed in Manchester, England.",
        ike: "Bilbao.",
        postedit: "I Am Kloot was formed in Bilbao, Spain.",
    },
];

fn case_edits() -> Vec<Edit> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, c)| Edit::new(i as u64, c.prompt, c.old, c.new).unwrap())
        .collect()
}

async fn c3_case_table() -> Outcome {
    let started = Instant::now();
    let embedder: Arc<dyn EmbeddingProvider> = Arc::new(HashEmbedder::default());
    let memory = Arc::new(EditMemory::new(embedder.clone(), KeyPolicy::RawEdit));
    memory.extend(case_edits()).await.map_err(|e| e.to_string())?;

    let base = ScriptedModel::new("base");
    let post = ScriptedModel::new("post-editor");
    for c in CASES {
        base.register_script(Matcher::Exact(c.query.into()), c.original);
        let ike_block = format!("New Fact: {} {}\nPrompt: {}", c.prompt, c.new, c.query);
        base.register_script(Matcher::Substring(ike_block), c.ike);
        post.register_script(Matcher::Substring(format!("### The query:\n{}\n", c.query)), c.postedit);
    }
    let base: Arc<dyn TextModel> = Arc::new(base);
    let models = Models::new(base.clone()).with_post_editor(Arc::new(post));
    let postedit = Editor::new(EditorConfig::new(EditorKind::PostEdit), memory.clone(), models.clone())
        .map_err(|e| e.to_string())?;
    let demo_records: Vec<QueryRecord> = (0..8u64)
        .map(|i| {
            let e = Edit::new(100 + i, format!("The mascot of team {i} is a"), "bear", "fox").unwrap();
            QueryRecord::new(e, format!("What animal is the mascot of team {i}?"), QueryType::Rephrase)
        })
        .collect();
    let demos = DemoIndex::ranked(DemoLibrary::from_records(&demo_records), embedder.as_ref())
        .await
        .map_err(|e| e.to_string())?;
    let ike = Editor::new(EditorConfig::new(EditorKind::Ike), memory.clone(), models)
        .map_err(|e| e.to_string())?
        .with_demos(Arc::new(demos));

    let mut trs = Vec::new();
    for (i, c) in CASES.iter().enumerate() {
        let d = postedit.respond(c.query, None).await.map_err(|e| e.to_string())?;
        ensure!(d.pair.matched_edit_id == Some(i as u64), "case {}: retrieved {:?}", i + 1, d.pair.matched_edit_id);
        ensure!(d.pair.edited == c.postedit, "case {}: got {:?}", i + 1, d.pair.edited);
        let te = editgate_core::metrics::te(&d.pair.edited, Scope::Ins, c.old, c.new);
        ensure!(te == 1.0, "case {}: TE {te}", i + 1);
        let tr_post = tr(Scope::Ins, &d.pair.original, &d.pair.edited, c.old, c.new);
        let i_out = ike.respond(c.query, Some(c.original)).await.map_err(|e| e.to_string())?;
        ensure!(i_out.pair.edited == c.ike, "case {}: IKE got {:?}", i + 1, i_out.pair.edited);
        let tr_ike = tr(Scope::Ins, c.original, &i_out.pair.edited, c.old, c.new);
        ensure!(tr_post > tr_ike, "case {}: TR postEdit {tr_post} <= IKE {tr_ike}", i + 1);
        ensure!(
            (tr_post - oracle::tr(true, c.original, c.postedit, c.old, c.new)).abs() < 1e-12,
            "case {}: TR disagrees with oracle",
            i + 1
        );
        trs.push((tr_post, tr_ike));
    }
    // Case 1 by hand: 5 of 6 unigrams shared; "mask" vs six tokens gives 2/7.
    ensure!((trs[0].0 - 5.0 / 6.0).abs() < 1e-12, "case 1 TR {} != 5/6", trs[0].0);
    ensure!(trs[0].1 < 0.3 && (trs[0].1 - 2.0 / 7.0).abs() < 1e-12, "case 1 IKE TR {}", trs[0].1);
    within(started, Duration::from_secs(5), "table cases")?;
    Ok(format!(
        "TE=1 on 5 cases; TR postEdit/IKE: {}",
        trs.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect::<Vec<_>>().join(" ")
    ))
}

async fn c4_retain_totality() -> Outcome {
    let upstream = MockUpstream::start(|q| format!("Upstream » {q}  (ünïcode, tabs\there)")).await;
    let base = HttpModel::new(ModelRef::new(ModelRole::Base, &upstream.url, "base")).map_err(|e| e.to_string())?;
    let post = ScriptedModel::constant("post-editor", "<Retain>");
    let memory = Arc::new(EditMemory::new(Arc::new(HashEmbedder::default()), KeyPolicy::RawEdit));
    memory.extend(case_edits()).await.map_err(|e| e.to_string())?;
    let state = AppState::new(memory, Models::new(Arc::new(base)).with_post_editor(Arc::new(post)), EditorKind::PostEdit);
    let app = router(Arc::new(state));
    for i in 0..100 {
        let query = format!("Unrelated question number {i}: who painted the ceiling?");
        let (status, body) = call(&app, "POST", "/v1/respond", Some(json!({ "query": query }))).await;
        ensure!(status == 200, "request {i}: status {status}");
        ensure!(body["edited"] == false, "request {i}: edited flag {}", body["edited"]);
        let expected = format!("Upstream » {query}  (ünïcode, tabs\there)");
        ensure!(body["response"].as_str() == Some(expected.as_str()), "request {i}: {:?}", body["response"]);
    }
    ensure!(upstream.bodies().len() == 100, "upstream saw {} calls", upstream.bodies().len());
    Ok("100/100 OOS requests returned upstream text unchanged".into())
}

async fn c5_retrieval() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for size in [1usize, 10, 100, 1000] {
        let memory = EditMemory::new(Arc::new(HashEmbedder::default()), KeyPolicy::RawEdit);
        // Edits with identical bag-of-words vectors cannot be told apart, so
        // redraw any that collide with an earlier one.
        let mut edits: Vec<Edit> = Vec::with_capacity(size);
        let mut seen = std::collections::HashSet::new();
        while edits.len() < size {
            let i = edits.len() as u64;
            let text = sentence(&mut rng, &["where", "who"]);
            let edit = Edit::new(i, format!("{text} item{i}?"), "old", "new").unwrap();
            let key: Vec<u64> = oracle::embed(&edit.raw).iter().map(|x| x.to_bits()).collect();
            if seen.insert(key) {
                edits.push(edit);
            }
        }
        memory.extend(edits.clone()).await.map_err(|e| e.to_string())?;
        let vectors: Vec<Vec<f64>> = edits.iter().map(|e| oracle::embed(&e.raw)).collect();
        for q in 0..100 {
            let query = sentence(&mut rng, &["city", "team", "Paris"]);
            let qv = oracle::embed(&query);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, v) in vectors.iter().enumerate() {
                let s: f64 = qv.iter().zip(v).map(|(a, b)| a * b).sum();
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            let hit = memory.retrieve(&query).await.map_err(|e| e.to_string())?;
            ensure!(hit.index == best, "size {size} query {q}: got {} want {best}", hit.index);
        }
        for (i, e) in edits.iter().enumerate() {
            let hit = memory.retrieve(&e.raw).await.map_err(|e| e.to_string())?;
            ensure!(hit.index == i, "size {size}: self-query {i} retrieved {}", hit.index);
        }
    }
    within(started, Duration::from_secs(30), "retrieval")?;
    Ok("brute-force agreement over 400 queries; self-query top-1 100%".into())
}

async fn c6_filter_soundness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut records = Vec::new();
    let augmenter = ScriptedModel::new("augmenter");
    let mut passing = Vec::new();
    for i in 0..50u64 {
        let prompt = format!("Where is landmark {i} located?");
        let edit = Edit::new(i, &prompt, "Paris", "Rome").unwrap();
        let query = format!("Which city hosts landmark {i}?");
        let target = match i % 4 {
            // Passing: new object present, old absent, new fact entailed.
            0 | 2 => format!("{prompt} Rome, as everyone knows."),
            // TE violation: old object kept.
            1 => format!("{prompt} Rome, formerly Paris."),
            // SE violation: the new fact is never stated as such.
            _ => "It now sits in Rome.".to_owned(),
        };
        if i % 2 == 0 {
            passing.push(i);
        }
        augmenter.register_script(Matcher::Substring(format!("### The query:\n{query}\n")), target.as_str());
        records.push(QueryRecord::new(edit.clone(), query, QueryType::Simple).with_original(format!("Landmark {i} is in Paris.")));
        if i % 5 == 0 {
            records.push(QueryRecord::new(edit, format!("Who designed landmark {i}?"), QueryType::Oos).with_original("An architect."));
        }
    }
    let oos_count = records.iter().filter(|r| r.query_type == QueryType::Oos).count();
    let input = dir.path().join("input.jsonl");
    write_dataset_file(&input, &records).map_err(|e| e.to_string())?;
    let pipeline = Pipeline::new(dir.path().join("run"));
    let unused_base = ScriptedModel::new("base");
    pipeline.stage_original(Some(&input), &unused_base).await.map_err(|e| e.to_string())?;
    pipeline.stage_edited(&augmenter).await.map_err(|e| e.to_string())?;
    pipeline.stage_filter(&SubstringNli).await.map_err(|e| e.to_string())?;
    let out = dir.path().join("sft.jsonl");
    pipeline.stage_export(Some(&out)).map_err(|e| e.to_string())?;

    ensure!(unused_base.call_count() == 0, "base called for pre-filled originals");
    ensure!(augmenter.call_count() == 50, "augmenter called {} times (OOS must cost none)", augmenter.call_count());
    let kept = parse_dataset_file(&out).map_err(|e| e.to_string())?;
    let ins: Vec<u64> = kept.iter().filter(|r| r.query_type != QueryType::Oos).map(|r| r.edit.edit_id).collect();
    ensure!(ins == passing, "kept INS ids {ins:?}");
    ensure!(passing.len() == 25, "constructed {} passing", passing.len());
    let oos: Vec<&QueryRecord> = kept.iter().filter(|r| r.query_type == QueryType::Oos).collect();
    ensure!(oos.len() == oos_count, "kept {} of {oos_count} OOS", oos.len());
    ensure!(oos.iter().all(|r| r.edited_response.as_deref() == Some("<Retain>")), "OOS target not <Retain>");
    for r in kept.iter().filter(|r| r.query_type != QueryType::Oos) {
        let (o, e) = r.responses().ok_or("exported record lacks responses")?;
        let s = Scorer { nli: &SubstringNli, embedder: &HashEmbedder::default() }
            .score(&r.edit, r.query_type, &r.query, o, e)
            .await
            .map_err(|e| e.to_string())?;
        ensure!(s.te == 1.0 && s.se == 1.0, "exported {} re-scores TE {} SE {}", r.edit.edit_id, s.te, s.se);
    }
    for f in [ORIGINALS_FILE, EDITED_FILE, KEPT_FILE] {
        ensure!(pipeline.dir().join(f).exists(), "{f} missing");
    }
    Ok(format!("exported 25 passing INS + {oos_count} OOS <Retain>"))
}

async fn c7_privacy() -> Outcome {
    let base = MockUpstream::start(|q| format!("Base answer to: {q}")).await;
    let post = MockUpstream::start(|prompt| {
        if prompt.contains("landmark") && prompt.contains("Rome") && prompt.contains("Which city hosts") {
            "It is in Rome.".to_owned()
        } else {
            "<Retain>".to_owned()
        }
    })
    .await;
    let model = |role, url: &str| -> Result<Arc<dyn TextModel>, String> {
        Ok(Arc::new(HttpModel::new(ModelRef::new(role, url, "m")).map_err(|e| e.to_string())?))
    };
    let models = Models::new(model(ModelRole::Base, &base.url)?).with_post_editor(model(ModelRole::PostEditor, &post.url)?);

    let mut edits: Vec<Edit> = case_edits();
    let records: Vec<QueryRecord> = edits
        .iter()
        .zip(CASES)
        .map(|(e, c)| QueryRecord::new(e.clone(), c.query, QueryType::Rephrase))
        .collect();
    let library = DemoLibrary::from_records(&records);
    let demo_text = render_ike(&library.demos, &edits[0], "probe").map_err(|e| e.to_string())?.text;
    let demos = DemoIndex::ranked(library.clone(), &HashEmbedder::default())
        .await
        .map_err(|e| e.to_string())?;
    let memory = Arc::new(EditMemory::new(Arc::new(HashEmbedder::default()), KeyPolicy::RawEdit));
    memory.extend(edits.clone()).await.map_err(|e| e.to_string())?;
    let state = AppState::new(memory, models, EditorKind::PostEdit).with_demos(Arc::new(demos));
    let app = router(Arc::new(state));

    let mut queries = Vec::new();
    for i in 0..50 {
        if i % 10 == 0 {
            let raw = format!("Paris >> Rome || Where is landmark {i} located?");
            let (s, body) = call(&app, "POST", "/v1/edits", Some(json!({ "edit": raw }))).await;
            ensure!(s == 201, "edit insert failed: {body}");
            edits.push(editgate_core::types::parse_edit_string(body["edit_id"].as_u64().unwrap(), &raw).unwrap());
        }
        let q = match i % 3 {
            0 => CASES[i % CASES.len()].query.to_owned(),
            1 => format!("Which city hosts landmark {}?", i - i % 10),
            _ => format!("Tell me a fact about topic {i}."),
        };
        let (s, _) = call(&app, "POST", "/v1/respond", Some(json!({ "query": q }))).await;
        ensure!(s == 200, "request {i} failed with {s}");
        queries.push(q);
    }

    let bodies = base.bodies();
    ensure!(bodies.len() == 50, "base saw {} requests", bodies.len());
    let mut forbidden: Vec<String> = edits.iter().map(|e| e.raw.clone()).collect();
    forbidden.extend(edits.iter().map(|e| json!(e.raw).to_string().trim_matches('"').to_owned()));
    forbidden.extend(library.demos.iter().map(|d| format!("New Fact: {} {}", d.edit.prompt, d.edit.new_object)));
    forbidden.extend(demo_text.split("\n\n").map(str::to_owned));
    forbidden.push("<Retain>".into());
    forbidden.push("\\u003cRetain\\u003e".into());
    forbidden.push("has been updated from".into());
    for (i, body) in bodies.iter().enumerate() {
        for f in &forbidden {
            ensure!(!body.contains(f.as_str()), "base request {i} leaked {f:?}");
        }
        let sent: serde_json::Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
        let content = sent["messages"][0]["content"].as_str().unwrap_or_default();
        ensure!(queries.contains(&content.to_owned()), "base request {i} content is not a user query: {content:?}");
    }
    let post_bodies = post.bodies();
    ensure!(
        post_bodies.iter().any(|b| b.contains("has been updated from")),
        "post-editor never received edit knowledge"
    );
    Ok(format!("50 requests, {} forbidden strings, 0 leaks to base", forbidden.len()))
}

fn scaling_dataset() -> Vec<QueryRecord> {
    (0..1000u64)
        .map(|i| {
            let edit = Edit::new(i, format!("What is the home city of club {i}?"), "Paris", "Rome").unwrap();
            let (query, qt) = match i % 3 {
                0 => (format!("What is the home city of club {i}?"), QueryType::Simple),
                1 => (format!("Where does club {i} play home games?"), QueryType::Rephrase),
                _ => (format!("Who founded the bakery on street {i}?"), QueryType::Oos),
            };
            QueryRecord::new(edit, query, qt).with_original(format!("Club {i} is based in Paris."))
        })
        .collect()
}

async fn c8_memory_scaling() -> Outcome {
    let started = Instant::now();
    let dataset = scaling_dataset();
    let post = ScriptedModel::new("post-editor").with_default("<Retain>");
    post.register_script(Matcher::Substring("home".into()), "It is based in Rome.");
    let models = Models::new(Arc::new(ScriptedModel::constant("base", "unused")))
        .with_post_editor(Arc::new(post));
    let ctx = EvalContext::new(models, Arc::new(HashEmbedder::default()), Arc::new(SubstringNli));
    let cfg = EvalConfig::new(EditorConfig::default());
    let sizes = [1, 10, 100, 1000];
    let a = run_memory_scaling(&dataset, &ctx, &cfg, &sizes, 7).await.map_err(|e| e.to_string())?;
    let b = run_memory_scaling(&dataset, &ctx, &cfg, &sizes, 7).await.map_err(|e| e.to_string())?;
    within(started, Duration::from_secs(120), "two scaling runs")?;
    ensure!(a.rows.len() == 4, "{} rows", a.rows.len());
    let got: Vec<usize> = a.rows.iter().map(|r| r.size).collect();
    ensure!(got == sizes, "row sizes {got:?}");
    for (row, run) in a.rows.iter().zip(&a.runs) {
        ensure!(
            run.traces.iter().all(|t| t.editor_trace.memory_size == row.size),
            "size {} run used other memory sizes",
            row.size
        );
    }
    ensure!(a.to_json().unwrap() == b.to_json().unwrap(), "JSON reports differ");
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write_to_dir(da.path()).map_err(|e| e.to_string())?;
    b.write_to_dir(db.path()).map_err(|e| e.to_string())?;
    let mut files = BTreeMap::new();
    for size in sizes {
        for f in ["report.json", "report.tsv", "traces.jsonl"] {
            files.insert(format!("size-{size}/{f}"), ());
        }
    }
    files.insert("scaling.json".into(), ());
    files.insert("scaling.tsv".into(), ());
    for f in files.keys() {
        let x = std::fs::read(da.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(db.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(x == y, "{f} differs between identical-seed runs");
    }
    Ok(format!(
        "4 rows in {:.1?}; byte-identical reruns; {}",
        started.elapsed(),
        a.to_tsv().lines().skip(1).collect::<Vec<_>>().join(" | ").replace('\t', " ")
    ))
}

async fn c9_pearson() -> Outcome {
    let manual = [4.8, 3.1, 2.2, 4.1, 3.7];
    let auto_up: Vec<f64> = manual.iter().map(|m| 20.0 * m + 3.0).collect();
    let auto_down: Vec<f64> = manual.iter().map(|m| 100.0 - 15.0 * m).collect();
    let up = pearson(&manual, &auto_up).map_err(|e| e.to_string())?;
    let down = pearson(&manual, &auto_down).map_err(|e| e.to_string())?;
    ensure!((up - 1.0).abs() < 1e-12, "perfect correlation gave {up}");
    ensure!((down + 1.0).abs() < 1e-12, "perfect anti-correlation gave {down}");
    ensure!(
        matches!(pearson(&manual, &[2.0; 5]), Err(Error::ZeroVariance)),
        "constant series did not error"
    );
    ensure!(
        matches!(pearson(&manual, &[1.0, 2.0]), Err(Error::LengthMismatch { .. })),
        "length mismatch did not error"
    );
    Ok("1.0 / -1.0 / ZeroVariance".into())
}

/// Live directional check; needs real endpoints and a dataset.
async fn c10_live() -> Option<Outcome> {
    let config = editgate::config::GatewayConfig::from_env().ok()?;
    let path = std::env::var("EG_LIVE_DATASET").ok()?;
    if config.base.is_none() || config.post_editor.is_none() {
        return None;
    }
    Some(
        async {
            let providers = editgate::config::Providers::build(&config, None).map_err(|e| e.to_string())?;
            let mut dataset = parse_dataset_file(&path).map_err(|e| e.to_string())?;
            dataset.truncate(30);
            let ctx = EvalContext::new(providers.models().map_err(|e| e.to_string())?, providers.embedder, providers.nli);
            let cmp = compare_editors(
                &dataset,
                &ctx,
                &[EditorKind::PostEdit, EditorKind::Prompt],
                &EvalConfig::new(EditorConfig::default()),
            )
            .await
            .map_err(|e| e.to_string())?;
            let gap = cmp
                .retention_gap(EditorKind::PostEdit, EditorKind::Prompt)
                .ok_or("an editor produced no report")?;
            ensure!(gap > 0.0, "postEdit retention does not exceed PROMPT (gap {gap})");
            Ok(format!("retention gap {gap:+.2}"))
        }
        .await,
    )
}

fn main() -> ExitCode {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let checks: Vec<(&str, Check)> = vec![
        ("1 metric oracle equivalence", Box::pin(c1_metric_oracle())),
        ("2 table arithmetic reproduction", Box::pin(c2_table_arithmetic())),
        ("3 case table end-to-end", Box::pin(c3_case_table())),
        ("4 retain-branch totality", Box::pin(c4_retain_totality())),
        ("5 retrieval correctness", Box::pin(c5_retrieval())),
        ("6 filter soundness", Box::pin(c6_filter_soundness())),
        ("7 privacy invariant", Box::pin(c7_privacy())),
        ("8 memory-scaling harness", Box::pin(c8_memory_scaling())),
        ("9 pearson utility", Box::pin(c9_pearson())),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match runtime.block_on(check) {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
        }
    }
    match runtime.block_on(c10_live()) {
        None => println!("SKIP criterion 10 live smoke run: set EG_BASE_URL, EG_POSTEDITOR_URL and EG_LIVE_DATASET"),
        Some(Ok(detail)) => println!("PASS criterion 10 live smoke run: {detail}"),
        Some(Err(why)) => {
            failed += 1;
            println!("FAIL criterion 10 live smoke run: {why}");
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
