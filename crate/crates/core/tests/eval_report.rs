mod common;

use std::collections::BTreeMap;

use common::{rng, shape_examples};
use kdseg::data::{Example, InMemorySplit};
use kdseg::eval::{
    compare_report, emit_figures, evaluate, mean_std, quantile, BoxStats, EvalResult, Pipeline, ReferenceTable,
    Segmenter, QUANTILE_METHOD,
};
use kdseg::loss::SegmentationMask;
use kdseg::models::{derive_prompt, Decoder, DecoderSpec, Encoder, EncoderSpec, PromptPolicy, PromptSet};
use kdseg::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// Returns the ground-truth mask of whichever example owns the image.
struct Oracle(Vec<Example<f64>>);

impl Segmenter<f64> for Oracle {
    fn segment(&self, image: &Tensor<f64>, _: &PromptSet) -> Result<SegmentationMask<f64>> {
        let ex = self
            .0
            .iter()
            .find(|e| e.image.data() == image.data())
            .expect("known image");
        SegmentationMask::probability(ex.mask.values().clone())
    }
}

struct Blank;

impl Segmenter<f64> for Blank {
    fn segment(&self, image: &Tensor<f64>, _: &PromptSet) -> Result<SegmentationMask<f64>> {
        let s = image.shape();
        SegmentationMask::probability(Tensor::zeros(&[1, 1, s[2], s[3]]))
    }
}

/// Dice from raw pixel counts.
fn pixel_dice(pred: &[f64], truth: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let p = p >= threshold;
        let t = t >= 0.5;
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// Sorts and indexes directly instead of going through `quantile`.
fn rank_quantile(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (s.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
}

fn result(model: &str, ds: &str, scores: &[f64]) -> EvalResult {
    let scored = scores
        .iter()
        .enumerate()
        .map(|(i, &d)| (format!("s{i:03}"), d))
        .collect();
    EvalResult::from_scores(ds, model, scored, PromptPolicy::CentroidPoint, 0.5, "abc").unwrap()
}

#[test]
fn ground_truth_segmenter_scores_one_and_blank_scores_zero() {
    let ex = shape_examples::<f64>(12, 32, 5, 0);
    let split = InMemorySplit::new(ex.clone());
    let r = evaluate(
        "shapes",
        "oracle",
        &split,
        &Oracle(ex),
        PromptPolicy::CentroidPoint,
        0.5,
        "x",
    )
    .unwrap();
    assert_eq!(r.n_samples, 12);
    assert_eq!(r.mean_dice, 1.0);
    assert_eq!(r.std_dice, 0.0);

    let r = evaluate("shapes", "blank", &split, &Blank, PromptPolicy::CentroidPoint, 0.5, "x").unwrap();
    assert!(r.mean_dice.abs() <= 1e-12, "{}", r.mean_dice);
}

#[test]
fn empty_test_split_is_an_eval_error() {
    let split = InMemorySplit::<f64>::new(Vec::new());
    let err = evaluate("shapes", "blank", &split, &Blank, PromptPolicy::CentroidPoint, 0.5, "x").unwrap_err();
    assert!(matches!(err, Error::Eval(_)), "{err}");
}

#[test]
fn empty_ground_truth_against_empty_prediction_scores_one() {
    let mut ex = shape_examples::<f64>(1, 32, 5, 0);
    ex[0].mask = SegmentationMask::binary(Tensor::zeros(&[1, 1, 32, 32])).unwrap();
    let split = InMemorySplit::new(ex);
    let r = evaluate("shapes", "blank", &split, &Blank, PromptPolicy::CentroidPoint, 0.5, "x").unwrap();
    assert_eq!(r.per_sample_dice, vec![1.0]);
}

#[test]
fn pipeline_mean_matches_pixel_count_oracle() {
    let enc = Encoder::<f64>::build(&EncoderSpec::toy_student(32, 8), 1).unwrap();
    let dec = Decoder::<f64>::build(&DecoderSpec::toy(32, 8), 2).unwrap();
    let pipe = Pipeline {
        encoder: &enc,
        decoder: &dec,
    };
    let ex = shape_examples::<f64>(10, 32, 9, 0);
    for policy in [PromptPolicy::CentroidPoint, PromptPolicy::BoundingBox] {
        for threshold in [0.3, 0.5, 0.7] {
            let r = evaluate(
                "shapes",
                "toy",
                &InMemorySplit::new(ex.clone()),
                &pipe,
                policy,
                threshold,
                "x",
            )
            .unwrap();
            let mut expect = Vec::new();
            for e in &ex {
                let truth = e.mask.values().data();
                let prompt = derive_prompt(truth, 32, 32, policy).unwrap();
                let pred = pipe.segment(&e.image, &prompt).unwrap();
                expect.push(pixel_dice(pred.values().data(), truth, threshold));
            }
            assert_eq!(r.sample_ids, ex.iter().map(|e| e.id.clone()).collect::<Vec<_>>());
            for (a, b) in r.per_sample_dice.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12);
            }
            let mean = expect.iter().sum::<f64>() / expect.len() as f64;
            assert!((r.mean_dice - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn aggregate_is_independent_of_sample_order() {
    let enc = Encoder::<f64>::build(&EncoderSpec::toy_student(32, 8), 1).unwrap();
    let dec = Decoder::<f64>::build(&DecoderSpec::toy(32, 8), 2).unwrap();
    let pipe = Pipeline {
        encoder: &enc,
        decoder: &dec,
    };
    let ex = shape_examples::<f64>(10, 32, 9, 0);
    let mut shuffled = ex.clone();
    shuffled.shuffle(&mut rng(4));
    let run = |v: Vec<Example<f64>>| {
        evaluate(
            "shapes",
            "toy",
            &InMemorySplit::new(v),
            &pipe,
            PromptPolicy::CentroidPoint,
            0.5,
            "x",
        )
        .unwrap()
    };
    let (a, b) = (run(ex), run(shuffled));
    assert!((a.mean_dice - b.mean_dice).abs() <= 1e-12);
    assert!((a.std_dice - b.std_dice).abs() <= 1e-12);
    let by_id = |r: &EvalResult| -> BTreeMap<String, f64> {
        r.sample_ids
            .iter()
            .cloned()
            .zip(r.per_sample_dice.iter().copied())
            .collect()
    };
    assert_eq!(by_id(&a), by_id(&b));
}

#[test]
fn mean_and_population_std_recompute() {
    let mut g = rng(11);
    for n in [1, 2, 7, 50] {
        let v: Vec<f64> = (0..n).map(|_| g.gen_range(0.0..1.0)).collect();
        let r = result("m", "d", &v);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((r.mean_dice - mean).abs() <= 1e-12);
        assert!((r.std_dice - var.sqrt()).abs() <= 1e-12);
        assert_eq!(mean_std(&v), (r.mean_dice, r.std_dice));
    }
}

#[test]
fn reference_only_report_lists_shipped_values_verbatim() {
    let table = ReferenceTable::shipped();
    let shipped = [
        ("Kvasir-SEG", [0.8715, 0.8719, 0.8586]),
        ("Fetal Head", [0.9755, 0.9734, 0.9774]),
        ("ISIC 2017", [0.9091, 0.9055, 0.9114]),
        ("Breast Ultrasound", [0.9051, 0.8985, 0.8216]),
    ];
    let report = compare_report(Vec::new(), Some(table), BTreeMap::new());
    assert_eq!(report.comparison.len(), 4);
    let md = report.to_markdown();
    for (row, (ds, vals)) in report.comparison.iter().zip(shipped) {
        assert_eq!(row.dataset, ds);
        assert!(row.measured_mean.is_none());
        assert!(row.delta.is_empty());
        for (model, v) in ["SAM", "MobileSAM", "KD SAM"].iter().zip(vals) {
            assert_eq!(row.reference[*model], v);
            assert!(md.contains(&format!("{v:.4}")), "{v} missing from markdown");
        }
    }
    let t = report.reference_table.as_ref().unwrap();
    assert_eq!(
        t.parameters.iter().map(|p| p.params).collect::<Vec<_>>(),
        [632_000_000, 5_000_000, 26_400_000]
    );
}

#[test]
fn measured_rows_carry_deltas_against_every_reference() {
    let r = result("KD SAM (toy)", "Kvasir-SEG", &[0.9, 0.8]);
    let report = compare_report(
        vec![r],
        Some(ReferenceTable::shipped()),
        BTreeMap::from([("toy".into(), 10)]),
    );
    let row = report.comparison.iter().find(|c| c.dataset == "Kvasir-SEG").unwrap();
    assert!((row.measured_mean.unwrap() - 0.85).abs() <= 1e-12);
    assert!((row.delta["SAM"] - (0.85 - 0.8715)).abs() <= 1e-12);
    assert!((row.delta["KD SAM"] - (0.85 - 0.8586)).abs() <= 1e-12);
    let md = report.to_markdown();
    assert!(md.contains("KD SAM (toy)") && md.contains("0.8500") && md.contains("| toy | 10 |"));
}

#[test]
fn quantiles_match_sort_and_index_oracle() {
    let mut g = rng(21);
    for _ in 0..100 {
        let n = g.gen_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| g.gen_range(0.0..1.0)).collect();
        let st = BoxStats::of(&v);
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        for (p, got) in [(0.25, st.q1), (0.5, st.median), (0.75, st.q3)] {
            assert!((got - rank_quantile(&v, p)).abs() <= 1e-12);
            assert_eq!(got, quantile(&s, p));
        }
        assert_eq!(st.min, s[0]);
        assert_eq!(st.max, s[n - 1]);
    }
    // hand value: h = 3 · 0.25 = 0.75 between 1 and 2
    assert!((quantile(&[1.0, 2.0, 4.0, 8.0], 0.25) - 1.75).abs() <= 1e-15);
}

fn sidecar_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Every `data-value="…"` in the document, in order.
fn svg_values(svg: &str) -> Vec<f64> {
    svg.split("data-value=\"")
        .skip(1)
        .map(|s| s[..s.find('"').unwrap()].parse().unwrap())
        .collect()
}

#[test]
fn figures_are_reproducible_and_svg_matches_sidecar() {
    let report = compare_report(
        vec![
            result("a", "Kvasir-SEG", &[0.5, 0.9, 0.7, 0.1]),
            result("b", "Fetal Head", &[0.3, 0.6, 0.95]),
        ],
        Some(ReferenceTable::shipped()),
        BTreeMap::new(),
    );
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let p1 = emit_figures(&report, d1.path()).unwrap();
    let p2 = emit_figures(&report, d2.path()).unwrap();
    assert_eq!(
        p1.keys().collect::<Vec<_>>(),
        ["bar_chart.csv", "bar_chart.svg", "box_plot.csv", "box_plot.svg"]
    );
    for name in p1.keys() {
        assert_eq!(
            std::fs::read(&p1[name]).unwrap(),
            std::fs::read(&p2[name]).unwrap(),
            "{name}"
        );
    }

    let box_csv = std::fs::read_to_string(&p1["box_plot.csv"]).unwrap();
    assert!(box_csv.starts_with(&format!("# {QUANTILE_METHOD}")));
    let rows = sidecar_rows(&box_csv);
    let box_svg = std::fs::read_to_string(&p1["box_plot.svg"]).unwrap();
    for r in &report.eval_results {
        let series = format!("{} | {}", r.model, r.dataset_name);
        let st = BoxStats::of(&r.per_sample_dice);
        let stat = |k: &str| -> f64 {
            rows.iter()
                .find(|x| x[0] == series && x[1] == "stat" && x[2] == k)
                .unwrap()[3]
                .parse()
                .unwrap()
        };
        assert!((stat("q1") - rank_quantile(&r.per_sample_dice, 0.25)).abs() <= 1e-12);
        assert!((stat("median") - rank_quantile(&r.per_sample_dice, 0.5)).abs() <= 1e-12);
        assert!((stat("q3") - rank_quantile(&r.per_sample_dice, 0.75)).abs() <= 1e-12);
        assert_eq!(stat("mean"), st.mean);
        let samples: Vec<f64> = rows
            .iter()
            .filter(|x| x[0] == series && x[1] == "sample")
            .map(|x| x[3].parse().unwrap())
            .collect();
        assert_eq!(samples, r.per_sample_dice);
        assert!(box_svg.contains(&format!("data-stat-q1=\"{}\"", st.q1)));
        assert!(box_svg.contains(&format!("data-stat-q3=\"{}\"", st.q3)));
    }
    // each series in the SVG: min, max, median, mean, then its samples
    let mut expect = Vec::new();
    for r in &report.eval_results {
        let st = BoxStats::of(&r.per_sample_dice);
        expect.extend([st.min, st.max, st.median, st.mean]);
        expect.extend(&r.per_sample_dice);
    }
    assert_eq!(svg_values(&box_svg), expect);

    let bar_csv = std::fs::read_to_string(&p1["bar_chart.csv"]).unwrap();
    let bars: Vec<f64> = sidecar_rows(&bar_csv).iter().map(|x| x[3].parse().unwrap()).collect();
    assert_eq!(bars.len(), 2 + 12);
    assert_eq!(
        svg_values(&std::fs::read_to_string(&p1["bar_chart.svg"]).unwrap()),
        bars
    );
}

#[test]
fn single_result_gives_one_box_and_one_bar() {
    let r = result("toy", "shapes", &[0.2, 0.4, 0.8]);
    let report = compare_report(vec![r.clone()], None, BTreeMap::new());
    let d = tempfile::tempdir().unwrap();
    let p = emit_figures(&report, d.path()).unwrap();
    let svg = std::fs::read_to_string(&p["box_plot.svg"]).unwrap();
    assert_eq!(svg.matches("class=\"box\"").count(), 1);
    let bar_svg = std::fs::read_to_string(&p["bar_chart.svg"]).unwrap();
    assert_eq!(bar_svg.matches("class=\"bar\"").count(), 1);
    let rows = sidecar_rows(&std::fs::read_to_string(&p["box_plot.csv"]).unwrap());
    let samples: Vec<f64> = rows
        .iter()
        .filter(|x| x[1] == "sample")
        .map(|x| x[3].parse().unwrap())
        .collect();
    assert_eq!(samples, r.per_sample_dice);
}

#[test]
fn nothing_to_plot_is_an_error() {
    let report = compare_report(Vec::new(), None, BTreeMap::new());
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(emit_figures(&report, d.path()), Err(Error::Eval(_))));
}
