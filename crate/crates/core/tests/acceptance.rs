//! Acceptance criteria 1-9, one pass/fail line each.
//!
//! Runs every criterion by default; pass criterion numbers as arguments to
//! run a subset (`cargo test --test acceptance -- 1 5`).

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use surgscene::dataset_io::{rle_decode, rle_encode};
use surgscene::fusion::{group_occurrences, residual_fuse, FusionMode, PromptBatch};
use surgscene::gradcheck::check_all;
use surgscene::grammar::{extract_seg_markers, parse, parse_frame, render};
use surgscene::harness::{ablation_study, crossval, train, ExperimentConfig};
use surgscene::metrics::{
    average_precision, phase_metrics, segmentation_metrics, triplet_ap_suite, ApFamily, EntityMaskPair,
    PhaseSequencePair, TripletScoreSet,
};
use surgscene::nn::{random_matrix, Activation, Mlp};
use surgscene::toy_model::Ablation;
use surgscene::{BinaryMask, EntityKind, FrameSemantics, Ivt, LabelSpace, SegMarker};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- fuzzing

fn random_semantics(rng: &mut impl Rng, space: &LabelSpace, frame_index: usize) -> FrameSemantics {
    let n = rng.random_range(0..=5);
    FrameSemantics {
        frame_index,
        phase: rng.random_range(0..space.phases().len()),
        triplets: (0..n)
            .map(|_| space.valid_triplets()[rng.random_range(0..space.num_triplets())])
            .collect(),
    }
}

fn random_think(rng: &mut impl Rng) -> String {
    const PIECES: &[&str] = &[
        "a", "hook", " ", "  ", "\n", "\t", "<", ">", "/", "think", "answer", "é", "切", "[SEG],", "(1)", ".", ",",
        "During", "phase,",
    ];
    let len = rng.random_range(0..30);
    let mut s = String::new();
    for _ in 0..len {
        s += PIECES.choose(rng).unwrap();
    }
    s.replace("</think>", "").replace("<answer>", "")
}

fn spaces() -> [LabelSpace; 2] {
    [LabelSpace::toy(), LabelSpace::cholect45()]
}

fn mutate(rng: &mut impl Rng, text: &str, space: &LabelSpace) -> String {
    let tokens: Vec<&str> = text.split(' ').collect();
    let mut tokens: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    let pick = |rng: &mut dyn rand::RngCore, n: usize| (rng.next_u64() as usize) % n.max(1);
    match rng.random_range(0..8) {
        0 => {
            let i = pick(rng, tokens.len());
            tokens.remove(i);
        }
        1 => {
            let i = pick(rng, tokens.len());
            let t = tokens[i].clone();
            tokens.insert(i, t);
        }
        2 => {
            let (i, j) = (pick(rng, tokens.len()), pick(rng, tokens.len()));
            tokens.swap(i, j);
        }
        3 => {
            let i = pick(rng, tokens.len());
            tokens[i] = ["[SEG],", "(9)", "are", "is", "7", "bogus", "</answer>", "<think>", "phase"]
                .choose(rng)
                .unwrap()
                .to_string();
        }
        4 => {
            let i = pick(rng, tokens.len());
            let lists = [space.phases(), space.instruments(), space.verbs(), space.targets()];
            let list = lists.choose(rng).unwrap();
            tokens[i] = list.choose(rng).unwrap().clone();
        }
        5 => {
            let chars: Vec<char> = text.chars().collect();
            let i = pick(rng, chars.len());
            let mut out: String = chars[..i].iter().collect();
            out.extend(&chars[(i + 1).min(chars.len())..]);
            return out;
        }
        6 => {
            let chars: Vec<char> = text.chars().collect();
            let i = pick(rng, chars.len() + 1);
            let c = *['<', '>', ' ', '(', ')', '.', ',', 'x', '\n', '\u{0}'].choose(rng).unwrap();
            let mut out: String = chars[..i].iter().collect();
            out.push(c);
            out.extend(&chars[i..]);
            return out;
        }
        _ => {
            let cut = pick(rng, text.len() + 1);
            let cut = (0..=cut).rev().find(|&c| text.is_char_boundary(c)).unwrap_or(0);
            return text[..cut].to_string();
        }
    }
    tokens.join(" ")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spaces = spaces();
    let mut texts = Vec::new();
    for i in 0..1000 {
        let space = &spaces[i % 2];
        let sem = random_semantics(&mut rng, space, 0);
        let think = random_think(&mut rng);
        let text = render(&sem, &think, space).map_err(|e| format!("render failed: {e}"))?;
        let out = parse(&text, space).map_err(|e| format!("round trip failed on {text:?}: {e}"))?;
        ensure(out.semantics == sem && out.think_text == think, || format!("round trip changed {text:?}"))?;
        texts.push((i % 2, text));
    }
    let mut rejected = 0;
    for k in 0..1000 {
        let (s, text) = &texts[k];
        let space = &spaces[*s];
        let mutated = mutate(&mut rng, text, space);
        let result = catch_unwind(AssertUnwindSafe(|| parse(&mutated, space)))
            .map_err(|_| format!("parser panicked on {mutated:?}"))?;
        match result {
            Err(_) => rejected += 1,
            Ok(out) => {
                // Accepted mutants must be well-formed outputs in their own right.
                out.semantics.validate(space).map_err(|e| format!("accepted invalid {mutated:?}: {e}"))?;
                ensure(out.seg_markers.len() == 2 * out.semantics.num_triplets(), || {
                    format!("marker count on {mutated:?}")
                })?;
                let again = render(&out.semantics, &out.think_text, space)
                    .and_then(|t| Ok(parse(&t, space).map(|o| o.semantics)))
                    .map_err(|e| e.to_string())?;
                ensure(again.as_ref() == Ok(&out.semantics), || format!("unstable parse of {mutated:?}"))?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2} s"))?;
    ensure(rejected > 500, || format!("only {rejected}/1000 mutants rejected"))?;
    Ok(format!("1000 exact round trips, {rejected}/1000 mutants rejected with typed errors, {secs:.2} s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spaces = spaces();
    let mut total_markers = 0;
    for c in 0..10_000 {
        let space = &spaces[c % 2];
        let frames = rng.random_range(1..=8);
        let sems: Vec<FrameSemantics> = (0..frames).map(|t| random_semantics(&mut rng, space, t)).collect();
        let outputs = sems
            .iter()
            .map(|s| parse_frame(&render(s, "", space).unwrap(), s.frame_index, space))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("clip {c}: {e}"))?;
        let markers: Vec<SegMarker> = extract_seg_markers(&outputs);
        let expected: usize = 2 * sems.iter().map(|s| s.num_triplets()).sum::<usize>();
        ensure(markers.len() == expected, || format!("clip {c}: {} markers, expected {expected}", markers.len()))?;
        let mut k = 0;
        for s in &sems {
            for (j, ivt) in s.triplets.iter().enumerate() {
                for (kind, label) in [(EntityKind::Instrument, ivt.instrument), (EntityKind::Target, ivt.target)] {
                    let m = markers[k];
                    ensure(
                        m.entity_kind == kind && m.label_id == label && m.triplet_index == j && m.frame_index == s.frame_index,
                        || format!("clip {c}: marker {k} out of order"),
                    )?;
                    k += 1;
                }
            }
        }
        total_markers += expected;
    }
    Ok(format!("10000 clips, {total_markers} markers, N_seg = 2 sum N on every clip"))
}

// ---------------------------------------------------------------- fusion

fn random_markers(rng: &mut impl Rng, n: usize) -> Vec<SegMarker> {
    (0..n)
        .map(|i| SegMarker {
            entity_kind: if rng.random_bool(0.5) {
                EntityKind::Instrument
            } else {
                EntityKind::Target
            },
            triplet_index: i / 2,
            frame_index: i / 4,
            label_id: rng.random_range(0..4),
            token_position: i,
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let n = rng.random_range(1..30);
        let d = rng.random_range(1..6);
        let markers = random_markers(&mut rng, n);
        let groups = group_occurrences(&markers);
        let z = random_matrix(&mut rng, n, d, 3.0);
        let batch = PromptBatch {
            embeddings: z.clone(),
            markers: markers.clone(),
        };
        let mut fusion = Mlp::random(&mut rng, (d, 5, d), (0.7, 0.7), Activation::Tanh);
        let fail = |what: &str| format!("trial {trial}: {what}");

        let (off, _) = residual_fuse(&batch, &groups, &fusion, FusionMode::NoFusion).map_err(|e| fail(&e.to_string()))?;
        ensure(
            off.embeddings.iter().zip(z.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
            || fail("no_fusion is not a bitwise pass-through"),
        )?;

        let (base, _) = residual_fuse(&batch, &groups, &fusion, FusionMode::Full).unwrap();
        // Singleton groups: z + Proj(z) computed directly.
        for (_, rows) in groups.iter().filter(|(_, r)| r.len() == 1) {
            let row = z.slice(ndarray::s![rows[0]..rows[0] + 1, ..]);
            let (proj, _) = fusion.forward(row);
            let expected = &row + &proj;
            ensure(base.embeddings.row(rows[0]) == expected.row(0), || fail("singleton formula"))?;
        }

        // Any permutation of rows (markers follow their rows) permutes the output.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let markers_perm: Vec<SegMarker> = perm.iter().map(|&p| markers[p]).collect();
        let (permuted, _) = residual_fuse(
            &PromptBatch {
                embeddings: Array2::from_shape_fn((n, d), |(r, j)| z[[perm[r], j]]),
                markers: markers_perm.clone(),
            },
            &group_occurrences(&markers_perm),
            &fusion,
            FusionMode::Full,
        )
        .unwrap();
        for (r, &p) in perm.iter().enumerate() {
            ensure(permuted.embeddings.row(r) == base.embeddings.row(p), || fail("permutation changed the output"))?;
        }

        fusion.w2.fill(0.0);
        fusion.b2.fill(0.0);
        let (zeroed, _) = residual_fuse(&batch, &groups, &fusion, FusionMode::Full).unwrap();
        ensure(zeroed.embeddings == z, || fail("zero second layer is not the identity"))?;
    }
    Ok("200 random batches: identity, permutation, singleton and pass-through all exact".to_string())
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let checks = check_all(20);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| c.to_string()).collect();
    ensure(failed.is_empty(), || failed.join("; "))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(format!("{} ops x 20 seeds, worst rel err {worst:.2e}, {secs:.1} s", checks.len()))
}

// ---------------------------------------------------------------- metric oracles

/// Sum over ranks of recall increment times the precision envelope.
fn oracle_ap(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut hits = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        if positives[i] {
            hits += 1.0;
        }
        precision.push(hits / (k + 1) as f64);
        recall.push(hits / total as f64);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..idx.len() {
        let envelope = precision[k..].iter().cloned().fold(0.0, f64::max);
        ap += (recall[k] - prev_recall) * envelope;
        prev_recall = recall[k];
    }
    Some(ap)
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        _ => false,
    }
}

fn random_space(rng: &mut impl Rng) -> LabelSpace {
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let (ni, nv, nt) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=4));
    let mut all: Vec<Ivt> = Vec::new();
    for i in 0..ni {
        for v in 0..nv {
            for t in 0..nt {
                all.push(Ivt::new(i, v, t));
            }
        }
    }
    all.shuffle(rng);
    all.truncate(rng.random_range(1..=all.len().min(10)));
    LabelSpace::new(names("p", rng.random_range(1..=5)), names("i", ni), names("v", nv), names("t", nt), all).unwrap()
}

fn family_oracle(space: &LabelSpace, scores: &[Vec<f64>], present: &[Vec<usize>], family: ApFamily) -> Option<f64> {
    let project = |ivt: Ivt| -> (Option<usize>, Option<usize>, Option<usize>) {
        let (i, v, t) = (Some(ivt.instrument), Some(ivt.verb), Some(ivt.target));
        match family {
            ApFamily::I => (i, None, None),
            ApFamily::V => (None, v, None),
            ApFamily::T => (None, None, t),
            ApFamily::Iv => (i, v, None),
            ApFamily::It => (i, None, t),
            ApFamily::Ivt => (i, v, t),
        }
    };
    let classes: BTreeSet<_> = space.valid_triplets().iter().map(|&ivt| project(ivt)).collect();
    let mut aps = Vec::new();
    for class in classes {
        let members: Vec<usize> = (0..space.num_triplets())
            .filter(|&k| project(space.valid_triplets()[k]) == class)
            .collect();
        let s: Vec<f64> = scores
            .iter()
            .map(|row| members.iter().map(|&k| row[k]).fold(f64::MIN, f64::max))
            .collect();
        let p: Vec<bool> = present.iter().map(|ids| members.iter().any(|k| ids.contains(k))).collect();
        if let Some(ap) = oracle_ap(&s, &p) {
            aps.push(ap);
        }
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn random_score(rng: &mut impl Rng) -> f64 {
    if rng.random_bool(0.3) {
        rng.random_range(0..5) as f64 / 4.0
    } else {
        rng.random::<f64>()
    }
}

fn check_ap_suite(rng: &mut impl Rng) -> Result<(), String> {
    let space = random_space(rng);
    let frames = rng.random_range(1..=200);
    let k = space.num_triplets();
    let density = rng.random_range(0.05..0.6);
    let mut data = TripletScoreSet::default();
    for _ in 0..frames {
        let present: Vec<usize> = (0..k).filter(|_| rng.random_bool(density)).collect();
        data.push((0..k).map(|_| random_score(rng)).collect(), present);
    }
    let suite = triplet_ap_suite(&data, &space).map_err(|e| e.to_string())?;
    for family in ApFamily::ALL {
        let expected = family_oracle(&space, &data.scores, &data.present, family);
        ensure(close(suite.get(family), expected), || {
            format!("{family:?}: {:?} vs oracle {expected:?}", suite.get(family))
        })?;
    }
    for (id, ap) in suite.per_triplet.iter().enumerate() {
        let s: Vec<f64> = data.scores.iter().map(|r| r[id]).collect();
        let p: Vec<bool> = data.present.iter().map(|ids| ids.contains(&id)).collect();
        ensure(close(*ap, oracle_ap(&s, &p)), || format!("triplet {id} AP"))?;
        ensure(close(average_precision(&s, &p).unwrap(), oracle_ap(&s, &p)), || "average_precision".into())?;
    }
    Ok(())
}

fn phase_oracle(pairs: &[PhaseSequencePair], phases: usize) -> [f64; 4] {
    let accuracy = pairs
        .iter()
        .map(|p| p.gt.iter().zip(&p.pred).filter(|(a, b)| a == b).count() as f64 / p.gt.len() as f64)
        .sum::<f64>()
        / pairs.len() as f64;
    let mut per_phase: Vec<Vec<[f64; 3]>> = vec![Vec::new(); phases];
    for pair in pairs {
        for (c, scores) in per_phase.iter_mut().enumerate() {
            let g: BTreeSet<usize> = (0..pair.gt.len()).filter(|&t| pair.gt[t] == c).collect();
            let q: BTreeSet<usize> = (0..pair.pred.len()).filter(|&t| pair.pred[t] == c).collect();
            if g.is_empty() && q.is_empty() {
                continue;
            }
            let inter = g.intersection(&q).count() as f64;
            let union = g.union(&q).count() as f64;
            let frac = |n: f64, s: &BTreeSet<usize>| if s.is_empty() { 0.0 } else { n / s.len() as f64 };
            scores.push([frac(inter, &q), frac(inter, &g), inter / union]);
        }
    }
    let used: Vec<&Vec<[f64; 3]>> = per_phase.iter().filter(|v| !v.is_empty()).collect();
    let mut out = [accuracy, 0.0, 0.0, 0.0];
    for k in 0..3 {
        let means: Vec<f64> = used.iter().map(|v| v.iter().map(|s| s[k]).sum::<f64>() / v.len() as f64).collect();
        out[k + 1] = means.iter().sum::<f64>() / means.len() as f64;
    }
    out
}

fn check_phase(rng: &mut impl Rng) -> Result<(), String> {
    let phases = rng.random_range(1..=10);
    let videos = rng.random_range(1..=6);
    let pairs: Vec<PhaseSequencePair> = (0..videos)
        .map(|_| {
            let len = rng.random_range(1..=200 / videos);
            let gt: Vec<usize> = (0..len).map(|_| rng.random_range(0..phases)).collect();
            let pred = gt
                .iter()
                .map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..phases) })
                .collect();
            PhaseSequencePair { gt, pred }
        })
        .collect();
    let m = phase_metrics(&pairs, phases).map_err(|e| e.to_string())?;
    let o = phase_oracle(&pairs, phases);
    let got = [m.accuracy, m.precision, m.recall, m.jaccard];
    ensure(got.iter().zip(&o).all(|(a, b)| (a - b).abs() <= 1e-9), || format!("phase {got:?} vs {o:?}"))
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let p = [0.0, 0.1, 0.4, 0.8][rng.random_range(0..4)];
    BinaryMask::from_fn(h, w, |_, _| rng.random_bool(p))
}

fn check_segmentation(rng: &mut impl Rng) -> Result<(), String> {
    let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
    let frames = rng.random_range(1..=30);
    let classes = rng.random_range(1..=5);
    let data: Vec<Vec<EntityMaskPair>> = (0..frames)
        .map(|_| {
            (0..rng.random_range(0..=4))
                .map(|_| EntityMaskPair {
                    kind: if rng.random_bool(0.5) {
                        EntityKind::Instrument
                    } else {
                        EntityKind::Target
                    },
                    label: rng.random_range(0..classes),
                    pred: random_mask(rng, h, w),
                    gt: random_mask(rng, h, w),
                })
                .collect()
        })
        .collect();
    let m = segmentation_metrics(&data).map_err(|e| e.to_string())?;

    // Pixel sets over (frame, row, col) per class.
    type Pixels = BTreeSet<(usize, usize, usize)>;
    let mut sets: BTreeMap<(EntityKind, usize), (Pixels, Pixels)> = BTreeMap::new();
    for (f, pairs) in data.iter().enumerate() {
        for p in pairs {
            let entry = sets.entry((p.kind, p.label)).or_default();
            for r in 0..h {
                for c in 0..w {
                    if p.pred.get(r, c) {
                        entry.0.insert((f, r, c));
                    }
                    if p.gt.get(r, c) {
                        entry.1.insert((f, r, c));
                    }
                }
            }
        }
    }
    let mut by_kind: BTreeMap<EntityKind, Vec<f64>> = BTreeMap::new();
    for ((kind, _), (pred, gt)) in &sets {
        if gt.is_empty() {
            continue;
        }
        let iou = pred.intersection(gt).count() as f64 / pred.union(gt).count() as f64;
        by_kind.entry(*kind).or_default().push(iou);
    }
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let iou_i = mean(by_kind.get(&EntityKind::Instrument).cloned().unwrap_or_default());
    let iou_t = mean(by_kind.get(&EntityKind::Target).cloned().unwrap_or_default());
    let miou = mean(by_kind.values().flatten().copied().collect());
    ensure(close(m.iou_i, iou_i) && close(m.iou_t, iou_t) && close(m.miou, miou), || {
        format!("segmentation {:?}/{:?}/{:?} vs {iou_i:?}/{iou_t:?}/{miou:?}", m.iou_i, m.iou_t, m.miou)
    })
}

fn criterion_5() -> Outcome {
    let hand = average_precision(&[0.9, 0.7, 0.3], &[true, false, true]).unwrap().unwrap();
    ensure((hand - 5.0 / 6.0).abs() <= 1e-12, || format!("hand case AP = {hand}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..500 {
        check_ap_suite(&mut rng).map_err(|e| format!("instance {i}: {e}"))?;
        check_phase(&mut rng).map_err(|e| format!("instance {i}: {e}"))?;
        check_segmentation(&mut rng).map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok(format!("500 instances agree with oracles within 1e-9; AP([.9,.7,.3],[1,0,1]) = {hand:.6}"))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..10_000 {
        let (h, w) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let mask = random_mask(&mut rng, h, w);
        let back = rle_decode(&rle_encode(&mask)).map_err(|e| format!("mask {i}: {e}"))?;
        ensure(back == mask, || format!("mask {i} ({h}x{w}) changed"))?;
    }
    Ok("10000 masks round trip".to_string())
}

// ---------------------------------------------------------------- training

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig::standard();
    let out = train(&config, Ablation::Full).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let m = &out.manifest.metrics;
    let (acc, ap, miou) = (m.accuracy.unwrap_or(0.0), m.ap_ivt.unwrap_or(0.0), m.miou.unwrap_or(0.0));
    let line = format!(
        "accuracy {acc:.4} AP_IVT {ap:.4} mIoU {miou:.4} after {} steps, {secs:.1} s",
        config.train.steps
    );
    ensure(config.train.steps <= 2000, || format!("{} steps", config.train.steps))?;
    ensure(acc >= 0.95 && ap >= 0.90 && miou >= 0.90 && secs < 600.0, || line.clone())?;
    Ok(line)
}

fn criterion_8() -> Outcome {
    let study = ablation_study(&ExperimentConfig::standard(), &[0, 1, 2], &Ablation::ALL).map_err(|e| e.to_string())?;
    print!("{}", study.table());
    let summary: Vec<String> = study
        .checks
        .iter()
        .map(|c| format!("{} {} {}/3", c.ablation, c.metric, c.seeds_not_higher))
        .collect();
    ensure(study.passed(), || summary.join(", "))?;
    Ok(summary.join(", "))
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_json(
        r#"{"synth": {"videos": 5, "frames": 4, "grid": [4, 4, 8], "resolution": [8, 8], "region": [1, 1]},
            "model": {"d_enc": 4, "d_llm": 6, "d_sam": 3, "proj_hidden": 4},
            "train": {"steps": 40}}"#,
    )
    .unwrap()
}

fn criterion_9() -> Outcome {
    let config = tiny().with_seed(9);
    for ablation in [Ablation::Full, Ablation::NoPerFrameToken] {
        let a = train(&config, ablation).map_err(|e| e.to_string())?.manifest.to_json();
        let b = train(&config, ablation).map_err(|e| e.to_string())?.manifest.to_json();
        ensure(a == b, || format!("{ablation} manifests differ"))?;
    }
    let a = crossval(&config, Ablation::Full).map_err(|e| e.to_string())?.to_json();
    let b = crossval(&config, Ablation::Full).map_err(|e| e.to_string())?.to_json();
    ensure(a == b, || "crossval reports differ".into())?;
    Ok("manifests and crossval reports are byte-identical across reruns".to_string())
}

fn main() -> ExitCode {
    let criteria: [(u32, fn() -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (n, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(run).unwrap_or_else(|_| Err("panicked".to_string()));
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n}: FAIL {detail}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
