use super::*;
use crate::datamodel::{EntitySchema, TextInstance};
use crate::synthgen::{generate, SynthConfig};
use candle_core::{Device, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn all_paths(k: usize, len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k as u32).map(move |t| {
                    let mut q = p.clone();
                    q.push(t);
                    q
                })
            })
            .collect();
    }
    out
}

fn brute_log_z(u: &[f64], trans: &[f64], k: usize, len: usize) -> f64 {
    let scores: Vec<f64> = all_paths(k, len).iter().map(|p| path_score(u, trans, k, p)).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

fn random_crf(m: usize, rng: &mut ChaCha8Rng, constrained: bool) -> Crf {
    let tags = TagSet::new(m);
    let s = tags.len() + 2;
    let t: Vec<f64> = (0..s * s).map(|_| rng.random_range(-1.5..1.5)).collect();
    let t = Tensor::from_vec(t, (s, s), &Device::Cpu).unwrap();
    if constrained {
        Crf::from_tensor(t, tags)
    } else {
        Crf::unconstrained(t, tags)
    }
}

fn random_unaries(n: usize, l: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let u: Vec<f64> = (0..n * l * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(u, (n, l, k), &Device::Cpu).unwrap()
}

#[test]
fn log_partition_and_viterbi_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..60 {
        let m = 1 + case % 2;
        let crf = random_crf(m, &mut rng, case % 3 != 0);
        let k = crf.tags.len();
        let len = 1 + case % 4;
        let u = random_unaries(1, len, k, &mut rng);
        let lz = crf.log_partition(&u, &[len]).unwrap().to_vec1::<f64>().unwrap()[0];
        let trans = crf.effective_transitions().unwrap();
        let flat = u.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((lz - brute_log_z(&flat, &trans, k, len)).abs() < 1e-9);
        let best = all_paths(k, len)
            .iter()
            .map(|p| path_score(&flat, &trans, k, p))
            .fold(f64::NEG_INFINITY, f64::max);
        let (path, score) = viterbi(&flat, &trans, k, len);
        assert!((score - best).abs() < 1e-9);
        assert!((path_score(&flat, &trans, k, &path) - best).abs() < 1e-9);
        assert!(score <= lz + 1e-12);
    }
}

#[test]
fn path_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let crf = random_crf(1, &mut rng, true);
    let k = crf.tags.len();
    for len in 1..=4 {
        let u = random_unaries(1, len, k, &mut rng);
        let lz = crf.log_partition(&u, &[len]).unwrap().to_vec1::<f64>().unwrap()[0];
        let trans = crf.effective_transitions().unwrap();
        let flat = u.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let total: f64 = all_paths(k, len).iter().map(|p| (path_score(&flat, &trans, k, p) - lz).exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn single_step_without_transitions_is_logsumexp() {
    let tags = TagSet::new(1);
    let s = tags.len() + 2;
    let crf = Crf::unconstrained(Tensor::zeros((s, s), DType::F64, &Device::Cpu).unwrap(), tags);
    let u = Tensor::new(&[[[0.3f64, -1.0, 2.0]]], &Device::Cpu).unwrap();
    let lz = crf.log_partition(&u, &[1]).unwrap().to_vec1::<f64>().unwrap()[0];
    let want = (0.3f64.exp() + (-1.0f64).exp() + 2.0f64.exp()).ln();
    assert!((lz - want).abs() < 1e-12);
    // Zero transitions: Viterbi is the per-position argmax.
    let u = Tensor::new(&[[[0.3f64, -1.0, 2.0], [1.0, 0.5, 0.2], [0.0, 0.9, 0.1]]], &Device::Cpu).unwrap();
    assert_eq!(crf.decode(&u, &[3]).unwrap(), vec![vec![2, 0, 1]]);
}

#[test]
fn empty_sequence_scores_start_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let crf = random_crf(2, &mut rng, true);
    let s = crf.tags.len() + 2;
    let t = crf.transitions.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let want = t[crf.tags.bos() * s + crf.tags.eos()];
    let u = random_unaries(1, 3, crf.tags.len(), &mut rng);
    let score = crf.score(&u, &[0], &[vec![]]).unwrap().to_vec1::<f64>().unwrap()[0];
    let lz = crf.log_partition(&u, &[0]).unwrap().to_vec1::<f64>().unwrap()[0];
    assert_eq!(score, want);
    assert_eq!(lz, want);
    assert_eq!(crf.decode(&u, &[0]).unwrap(), vec![Vec::<u32>::new()]);
}

#[test]
fn nll_is_nonnegative_and_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let crf = random_crf(1, &mut rng, true);
    let k = crf.tags.len();
    let u = random_unaries(2, 4, k, &mut rng);
    let gold = vec![vec![1, 2, 0], vec![0, 0, 1, 2]];
    let nll = crf.nll(&u, &[3, 4], &gold).unwrap().to_vec1::<f64>().unwrap();
    let trans = crf.effective_transitions().unwrap();
    let flat = u.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    for (i, (g, &len)) in gold.iter().zip(&[3usize, 4]).enumerate() {
        let ui = &flat[i * 4 * k..(i + 1) * 4 * k];
        let want = brute_log_z(ui, &trans, k, len) - path_score(ui, &trans, k, g);
        assert!((nll[i] - want).abs() < 1e-9);
        assert!(nll[i] >= 0.0);
    }
    assert!(crf.nll(&u, &[3, 4], &[vec![2, 2, 0], vec![0, 0, 1, 2]]).is_err());
}

#[test]
fn only_gold_path_finite_gives_zero_loss() {
    // One entity, length 2: make every path except B-I prohibitively bad.
    let tags = TagSet::new(1);
    let s = tags.len() + 2;
    let crf = Crf::from_tensor(Tensor::zeros((s, s), DType::F64, &Device::Cpu).unwrap(), tags);
    let u = Tensor::new(&[[[-1e3f64, 1e3, -1e3], [-1e3, -1e3, 1e3]]], &Device::Cpu).unwrap();
    let nll = crf.nll(&u, &[2], &[vec![1, 2]]).unwrap().to_vec1::<f64>().unwrap()[0];
    assert!(nll.abs() < 1e-12);
}

#[test]
fn nll_gradient_is_marginals_minus_gold() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let crf = random_crf(1, &mut rng, true);
    let k = crf.tags.len();
    let (l, lengths) = (3, [3usize, 2]);
    let gold = vec![vec![0, 1, 2], vec![1, 0]];
    let u = random_unaries(2, l, k, &mut rng);
    let var = Var::from_tensor(&u).unwrap();
    let loss = crf.nll(var.as_tensor(), &lengths, &gold).unwrap().sum_all().unwrap();
    let grads = loss.backward().unwrap();
    let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let base = u.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let trans = crf.effective_transitions().unwrap();
    // Brute-force marginals.
    for (i, &len) in lengths.iter().enumerate() {
        let ui = &base[i * l * k..(i + 1) * l * k];
        let lz = brute_log_z(ui, &trans, k, len);
        let mut marg = vec![0.0; l * k];
        for p in all_paths(k, len) {
            let w = (path_score(ui, &trans, k, &p) - lz).exp();
            for (t, &tag) in p.iter().enumerate() {
                marg[t * k + tag as usize] += w;
            }
        }
        for t in 0..l {
            for j in 0..k {
                let gold_hit = t < len && gold[i][t] as usize == j;
                let want = marg[t * k + j] - if gold_hit { 1.0 } else { 0.0 };
                assert!((g[i * l * k + t * k + j] - want).abs() < 1e-9);
            }
        }
    }
    // Central differences.
    let eval = |x: Vec<f64>| {
        let t = Tensor::from_vec(x, (2, l, k), &Device::Cpu).unwrap();
        crf.nll(&t, &lengths, &gold).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
    };
    let eps = 1e-6;
    for idx in 0..base.len() {
        let mut p = base.clone();
        p[idx] += eps;
        let mut m = base.clone();
        m[idx] -= eps;
        let fd = (eval(p) - eval(m)) / (2.0 * eps);
        let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
        assert!(rel <= 1e-4 || (fd - g[idx]).abs() < 1e-9, "{idx}: {fd} vs {}", g[idx]);
    }
}

#[test]
fn transition_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let tags = TagSet::new(1);
    let s = tags.len() + 2;
    let t0: Vec<f64> = (0..s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u = random_unaries(2, 3, tags.len(), &mut rng);
    let gold = vec![vec![1, 2, 0], vec![0, 1]];
    let eval = |t: &Tensor| {
        Crf::from_tensor(t.clone(), tags)
            .nll(&u, &[3, 2], &gold)
            .unwrap()
            .sum_all()
            .unwrap()
    };
    let var = Var::from_tensor(&Tensor::from_vec(t0.clone(), (s, s), &Device::Cpu).unwrap()).unwrap();
    let grads = eval(var.as_tensor()).backward().unwrap();
    let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let eps = 1e-6;
    for idx in 0..t0.len() {
        let shifted = |d: f64| {
            let mut p = t0.clone();
            p[idx] += d;
            eval(&Tensor::from_vec(p, (s, s), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap()
        };
        let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
        assert!((fd - g[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{idx}: {fd} vs {}", g[idx]);
    }
}

proptest! {
    #[test]
    fn decoded_paths_are_valid_iob(seed in 0u64..10_000, m in 1usize..4, len in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crf = random_crf(m, &mut rng, true);
        let u = random_unaries(1, len.max(1), crf.tags.len(), &mut rng);
        let path = &crf.decode(&u, &[len]).unwrap()[0];
        prop_assert_eq!(path.len(), len);
        prop_assert!(crf.tags.is_valid(path));
    }

    #[test]
    fn spans_round_trip(len in 1usize..12, start in 0usize..12, width in 1usize..12, e in 0usize..3) {
        let tags = TagSet::new(3);
        let start = start.min(len - 1);
        let end = (start + width).min(len);
        let seq = tags.encode_span(len, Some((start..end, e)));
        prop_assert!(tags.is_valid(&seq));
        prop_assert_eq!(tags.spans(&seq), vec![(e, start..end)]);
    }
}

fn schema() -> EntitySchema {
    EntitySchema::nutrition(3, 24).unwrap()
}

fn inst(x: f64, y: f64, text: &str, e: Option<usize>) -> TextInstance {
    TextInstance {
        bbox: BBox::new(x, y, x + 6.0 * text.len() as f64, y + 10.0),
        polygon: None,
        transcript: text.into(),
        entity_id: e,
    }
}

#[test]
fn decode_entities_fixtures() {
    let schema = schema();
    let tags = TagSet::new(3);
    let energy = "100kcal".to_string();
    let all_energy: Vec<u32> = (0..7).map(|t| if t == 0 { tags.begin(0) } else { tags.inside(0) }).collect();
    let boxes = [BBox::new(0.0, 0.0, 40.0, 10.0)];
    let got = decode_entities(&[all_energy], &[energy.clone()], &boxes, &tags, &schema);
    assert_eq!(got.get("Energy").map(String::as_str), Some("100kcal"));
    assert_eq!(got.len(), 1);
    let none = decode_entities(&[vec![0; 7]], &[energy], &boxes, &tags, &schema);
    assert!(none.is_empty());
    // Two instances tagged for the same entity, given bottom-first.
    let texts = vec!["mg".to_string(), "Fat 12".to_string()];
    let seqs = vec![
        vec![tags.begin(1), tags.inside(1)],
        vec![0, 0, 0, 0, tags.begin(1), tags.inside(1)],
    ];
    let boxes = [BBox::new(0.0, 20.0, 12.0, 30.0), BBox::new(0.0, 0.0, 36.0, 10.0)];
    let got = decode_entities(&seqs, &texts, &boxes, &tags, &schema);
    assert_eq!(got.get("Fat").map(String::as_str), Some("12 mg"));
}

#[test]
fn gold_tags_round_trip_on_synthetic_samples() {
    let schema = EntitySchema::nutrition(8, 24).unwrap();
    let tags = TagSet::new(8);
    let mut cfg = SynthConfig::new(40, [144, 160], schema.entities.clone(), 77);
    cfg.split_prob = 0.5;
    let split = generate(&cfg, &schema).unwrap();
    for sample in &split.samples {
        let gold = gold_tags(sample, &schema, &tags).unwrap();
        let texts: Vec<String> = sample.instances.iter().map(|i| i.transcript.clone()).collect();
        let got = decode_entities(&gold, &texts, &sample.boxes(), &tags, &schema);
        assert_eq!(got, sample.entity_map(), "sample {}", sample.id);
    }
    let manual = DocumentSample {
        id: "m".into(),
        image: image::RgbImage::new(64, 64),
        instances: vec![inst(0.0, 0.0, "Energy 100kcal", Some(0)), inst(0.0, 20.0, "Nutrition", None)],
        entity_values: vec![("Energy".into(), "100kcal".into())],
    };
    let gold = gold_tags(&manual, &schema, &tags).unwrap();
    assert_eq!(gold[1], vec![0; 9]);
    assert_eq!(gold[0][7], tags.begin(0));
    assert_eq!(gold[0][6], 0);
}

fn tensor3(n: usize, l: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let v: Vec<f64> = (0..n * l * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (n, l, c), &Device::Cpu).unwrap()
}

#[test]
fn fuse_fixtures_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, l, c, m) = (2, 4, 6, 3);
    let mut store = ParamStore::new(DType::F64, 1);
    let fusion = Fusion::new(&mut store, "fuse", m, c).unwrap();
    let t = tensor3(n, l, c, &mut rng);
    let e = tensor3(1, n, c, &mut rng).squeeze(0).unwrap();
    let s = tensor3(1, n, m, &mut rng).squeeze(0).unwrap();
    let lengths = [4, 2];
    // P starts at zero and E = 0: fused equals T on valid steps.
    let zero_e = e.zeros_like().unwrap();
    let f = fusion.fuse(&t, Some(&zero_e), Some(&s), &lengths).unwrap();
    let (tv, fv) = (t.to_vec3::<f64>().unwrap(), f.tensor.to_vec3::<f64>().unwrap());
    for i in 0..n {
        for step in 0..l {
            for u in 0..c {
                let want = if step < lengths[i] { tv[i][step][u] } else { 0.0 };
                assert_eq!(fv[i][step][u], want);
            }
        }
    }
    // T = 0, S = 0: every valid step is E[i].
    let f = fusion.fuse(&t.zeros_like().unwrap(), Some(&e), Some(&s.zeros_like().unwrap()), &[4, 4]).unwrap();
    let (ev, fv) = (e.to_vec2::<f64>().unwrap(), f.tensor.to_vec3::<f64>().unwrap());
    for i in 0..n {
        for step in 0..l {
            assert_eq!(fv[i][step], ev[i]);
        }
    }
    // Random projection against an elementwise oracle.
    let w: Vec<f64> = (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.get("fuse.weight").unwrap().set(&Tensor::from_vec(w.clone(), (m, c), &Device::Cpu).unwrap()).unwrap();
    store.get("fuse.bias").unwrap().set(&Tensor::from_vec(b.clone(), c, &Device::Cpu).unwrap()).unwrap();
    let f = fusion.fuse(&t, Some(&e), Some(&s), &lengths).unwrap().tensor.to_vec3::<f64>().unwrap();
    let sv = s.to_vec2::<f64>().unwrap();
    for i in 0..n {
        for step in 0..lengths[i] {
            for u in 0..c {
                let p: f64 = (0..m).map(|j| sv[i][j] * w[j * c + u]).sum::<f64>() + b[u];
                let want = tv[i][step][u] + ev[i][u] + p;
                assert!((f[i][step][u] - want).abs() < 1e-12);
            }
        }
    }
    let bad = tensor3(1, 3, c, &mut rng).squeeze(0).unwrap();
    assert!(matches!(fusion.fuse(&t, Some(&bad), None, &lengths), Err(Error::Shape { .. })));
}

#[test]
fn bilstm_ignores_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new(DType::F64, 2);
    let lstm = BiLstm::new(&mut store, "lstm", 6).unwrap();
    let x = tensor3(1, 5, 6, &mut rng);
    let y = lstm.forward(&x, &[3]).unwrap().to_vec3::<f64>().unwrap();
    // Changing padded steps leaves valid outputs untouched.
    let mut data = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    for v in &mut data[3 * 6..] {
        *v += 5.0;
    }
    let x2 = Tensor::from_vec(data, (1, 5, 6), &Device::Cpu).unwrap();
    let y2 = lstm.forward(&x2, &[3]).unwrap().to_vec3::<f64>().unwrap();
    for t in 0..3 {
        assert_eq!(y[0][t], y2[0][t]);
    }
    assert_eq!(y[0][0].len(), 6);
}
