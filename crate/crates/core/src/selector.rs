//! Per-image class-token selection.
//!
//! For every present class the CAM-masked image embedding is scored against
//! the embeddings of all candidate prompts; the argmax picks the class token
//! used downstream. Ties break toward index 0, the ground-truth name, so a
//! degenerate pool reproduces the fixed-prompt baseline exactly.

use crate::adapter::{adapter_forward, AdapterParams};
use crate::cam::{ActivationMaps, ImageSample};
use crate::encoder::{cosine_similarity, make_masked_pair, EmbeddingVector, EncoderPair};
use crate::prompt::{build_prompt_set, PromptTemplate, SynonymPool};
use crate::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Cosine similarities of one masked image against the `m+1` candidate
/// prompts of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector<T> {
    pub values: Vec<T>,
    pub class_index: usize,
    pub image_id: String,
}

/// The outcome of selecting a class token for one (image, class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord<T> {
    pub image_id: String,
    pub class_index: usize,
    /// Index into the candidate list; 0 is the ground-truth name.
    pub chosen_index: usize,
    pub chosen_name: String,
    pub similarities: SimilarityVector<T>,
}

/// Wire form of a selection record (one NDJSON line).
#[derive(Debug, Serialize, Deserialize)]
struct DumpRecord<T> {
    image_id: String,
    class_index: usize,
    chosen_index: usize,
    chosen_name: String,
    similarities: Vec<T>,
}

impl<T: Scalar> SelectionRecord<T> {
    /// Serialize to the newline-delimited JSON dump schema.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&DumpRecord {
            image_id: self.image_id.clone(),
            class_index: self.class_index,
            chosen_index: self.chosen_index,
            chosen_name: self.chosen_name.clone(),
            similarities: self.similarities.values.clone(),
        })
        .expect("record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let d: DumpRecord<T> = serde_json::from_str(line)
            .map_err(|e| Error::argument(format!("bad selection record: {e}")))?;
        Ok(SelectionRecord {
            similarities: SimilarityVector {
                values: d.similarities,
                class_index: d.class_index,
                image_id: d.image_id.clone(),
            },
            image_id: d.image_id,
            class_index: d.class_index,
            chosen_index: d.chosen_index,
            chosen_name: d.chosen_name,
        })
    }
}

/// Score a visual embedding against candidate text embeddings, in input
/// order.
pub fn score_candidates<T: Scalar>(
    v_io: &EmbeddingVector<T>,
    text_embs: &[EmbeddingVector<T>],
    class_index: usize,
    image_id: &str,
) -> Result<SimilarityVector<T>> {
    if text_embs.is_empty() {
        return Err(Error::argument("no candidate text embeddings"));
    }
    let values = text_embs
        .iter()
        .map(|t| cosine_similarity(v_io, t))
        .collect::<Result<Vec<T>>>()?;
    Ok(SimilarityVector {
        values,
        class_index,
        image_id: image_id.to_string(),
    })
}

/// Argmax over a similarity vector; exact ties go to the lowest index so the
/// ground truth wins.
pub fn select_class<T: Scalar>(
    scores: &SimilarityVector<T>,
    pool: &SynonymPool,
) -> Result<SelectionRecord<T>> {
    if scores.values.len() != pool.m() + 1 {
        return Err(Error::argument(format!(
            "similarity vector has {} entries, pool needs {}",
            scores.values.len(),
            pool.m() + 1
        )));
    }
    if scores.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("non-finite similarity"));
    }
    let mut chosen = 0;
    for (j, &v) in scores.values.iter().enumerate() {
        if v > scores.values[chosen] {
            chosen = j;
        }
    }
    Ok(SelectionRecord {
        image_id: scores.image_id.clone(),
        class_index: scores.class_index,
        chosen_index: chosen,
        chosen_name: pool
            .name_at(chosen)
            .expect("chosen index within pool")
            .to_string(),
        similarities: scores.clone(),
    })
}

/// Run selection for every (image, present class) pair of a batch.
///
/// `maps` must align with `samples` one-to-one and carry sigmoid-normalized
/// values. When `refine_with` is given, the visual embedding is passed
/// through that adapter before scoring (the `select_after_adapter` mode);
/// by default the raw masked-image embedding is scored.
pub fn select_for_batch<T: Scalar>(
    samples: &[ImageSample<T>],
    maps: &[ActivationMaps<T>],
    pools: &BTreeMap<usize, SynonymPool>,
    template: &PromptTemplate,
    enc: &EncoderPair<T>,
    refine_with: Option<&AdapterParams<T>>,
) -> Result<Vec<SelectionRecord<T>>> {
    if samples.len() != maps.len() {
        return Err(Error::pipeline(format!(
            "{} samples but {} activation maps",
            samples.len(),
            maps.len()
        )));
    }
    let mut records = Vec::new();
    for (sample, map) in samples.iter().zip(maps.iter()) {
        for k in sample.present_classes() {
            if k >= map.num_classes() {
                return Err(Error::pipeline(format!(
                    "image {}: no activation map for present class {k}",
                    sample.id
                )));
            }
            let pool = pools.get(&k).ok_or_else(|| {
                Error::pipeline(format!("no synonym pool for class {k}"))
            })?;
            let (fg, _) = make_masked_pair(sample, map, k)?;
            let mut v_io = enc.encode_image(&fg)?;
            if let Some(adapter) = refine_with {
                v_io = adapter_forward(&v_io, adapter)?;
            }
            let prompt_set = build_prompt_set(pool, template);
            let text_embs = enc.encode_texts(&prompt_set)?;
            let scores = score_candidates(&v_io, &text_embs, k, &sample.id)?;
            records.push(select_class(&scores, pool)?);
        }
    }
    Ok(records)
}

/// Fraction of records per class whose chosen token is the ground truth;
/// classes with no records are `None`.
pub fn selection_frequency<T: Scalar>(
    records: &[SelectionRecord<T>],
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    if records.is_empty() {
        return Err(Error::argument("no selection records"));
    }
    let mut total = vec![0usize; num_classes];
    let mut ground = vec![0usize; num_classes];
    for r in records {
        if r.class_index >= num_classes {
            return Err(Error::argument(format!(
                "record class {} out of range {num_classes}",
                r.class_index
            )));
        }
        total[r.class_index] += 1;
        if r.chosen_index == 0 {
            ground[r.class_index] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|k| {
            if total[k] == 0 {
                None
            } else {
                Some(ground[k] as f64 / total[k] as f64)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Modality;
    use crate::tensor::Tensor3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(m: usize) -> SynonymPool {
        SynonymPool {
            class_index: 0,
            ground_truth_name: "cat".into(),
            synonyms: (0..m).map(|j| format!("syn{j}")).collect(),
            corpus_tag: "test".into(),
        }
    }

    fn sim(values: Vec<f64>) -> SimilarityVector<f64> {
        SimilarityVector {
            values,
            class_index: 0,
            image_id: "img".into(),
        }
    }

    fn emb(values: Vec<f64>, m: Modality) -> EmbeddingVector<f64> {
        EmbeddingVector::new(values, m).unwrap()
    }

    #[test]
    fn scoring_identity_and_orthogonal() {
        let v = emb(vec![0.3, -0.8, 0.5], Modality::Visual);
        let s = score_candidates(&v, &[v.clone()], 0, "img").unwrap();
        assert!((s.values[0] - 1.0).abs() < 1e-12);

        let v = emb(vec![1.0, 0.0], Modality::Visual);
        let cands = vec![
            emb(vec![0.0, 1.0], Modality::Text),
            emb(vec![2.0, 0.0], Modality::Text),
            emb(vec![0.0, -3.0], Modality::Text),
        ];
        let s = score_candidates(&v, &cands, 0, "img").unwrap();
        assert_eq!(s.values[0], 0.0);
        assert!((s.values[1] - 1.0).abs() < 1e-12);
        assert_eq!(s.values[2], 0.0);
    }

    #[test]
    fn scoring_matches_independent_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v_raw: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = emb(v_raw.clone(), Modality::Visual);
        let cands: Vec<EmbeddingVector<f64>> = (0..5)
            .map(|_| emb((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(), Modality::Text))
            .collect();
        let s = score_candidates(&v, &cands, 0, "img").unwrap();
        for (j, c) in cands.iter().enumerate() {
            // straight-line cosine
            let d: f64 = v_raw.iter().zip(c.values.iter()).map(|(a, b)| a * b).sum();
            let nu: f64 = v_raw.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = c.values.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((s.values[j] - d / (nu * nv)).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_with_ground_truth_ties() {
        let p = pool(0);
        let r = select_class(&sim(vec![0.4]), &p).unwrap();
        assert_eq!((r.chosen_index, r.chosen_name.as_str()), (0, "cat"));

        let p = pool(2);
        let r = select_class(&sim(vec![0.2, 0.9, 0.5]), &p).unwrap();
        assert_eq!((r.chosen_index, r.chosen_name.as_str()), (1, "syn0"));

        // exact tie between ground truth and a synonym: index 0 wins
        let r = select_class(&sim(vec![0.9, 0.9, 0.1]), &p).unwrap();
        assert_eq!(r.chosen_index, 0);
    }

    #[test]
    fn argmax_agrees_with_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..1000 {
            let m = rng.gen_range(0..6);
            let p = pool(m);
            let mut values: Vec<f64> = (0..=m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if trial % 7 == 0 && m > 0 {
                // manufacture an exact tie
                values[m] = values[0];
            }
            let r = select_class(&sim(values.clone()), &p).unwrap();
            let mut best = 0;
            for j in 0..values.len() {
                if values[j] > values[best] {
                    best = j;
                }
            }
            assert_eq!(r.chosen_index, best, "trial {trial}: {values:?}");
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(select_class(&sim(vec![0.1, 0.2]), &pool(0)).is_err());
    }

    #[test]
    fn chosen_index_invariant_under_positive_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = EncoderPair::<f64>::mock(5, 32);
        let cands: Vec<EmbeddingVector<f64>> = (0..4)
            .map(|j| enc.encode_text(&format!("A photo of option {j}.")).unwrap())
            .collect();
        for trial in 0..1000 {
            let v_raw: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
            let v = emb(v_raw.clone(), Modality::Visual);
            let vs = emb(v_raw.iter().map(|x| x * scale).collect(), Modality::Visual);
            let a = select_class(&score_candidates(&v, &cands, 0, "i").unwrap(), &pool(3)).unwrap();
            let b =
                select_class(&score_candidates(&vs, &cands, 0, "i").unwrap(), &pool(3)).unwrap();
            assert_eq!(a.chosen_index, b.chosen_index, "trial {trial}");
        }
    }

    fn toy_batch() -> (Vec<ImageSample<f64>>, Vec<ActivationMaps<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |labels: Vec<bool>, rng: &mut ChaCha8Rng| {
            let px = Tensor3::from_fn(3, 16, 16, |_, _, _| rng.gen_range(0.0..1.0));
            ImageSample::new(format!("toy{}", labels.iter().filter(|&&b| b).count()), px, labels)
                .unwrap()
        };
        let samples = vec![
            mk(vec![true, false], &mut rng),
            mk(vec![true, true], &mut rng),
        ];
        let maps = (0..2)
            .map(|_| ActivationMaps {
                values: Tensor3::from_fn(2, 4, 4, |_, _, _| rng.gen_range(0.0..1.0)),
                normalized: true,
            })
            .collect();
        (samples, maps)
    }

    fn toy_pools(m: usize) -> BTreeMap<usize, SynonymPool> {
        let mut pools = BTreeMap::new();
        for k in 0..2 {
            pools.insert(
                k,
                SynonymPool {
                    class_index: k,
                    ground_truth_name: format!("thing{k}"),
                    synonyms: (0..m).map(|j| format!("thing{k}-alt{j}")).collect(),
                    corpus_tag: "test".into(),
                },
            );
        }
        pools
    }

    #[test]
    fn batch_selection_covers_present_classes_only() {
        let (samples, maps) = toy_batch();
        let enc = EncoderPair::<f64>::mock(5, 32);
        let records = select_for_batch(
            &samples,
            &maps,
            &toy_pools(2),
            &PromptTemplate::default(),
            &enc,
            None,
        )
        .unwrap();
        // image 0 has one present class, image 1 has two
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].class_index, 0);
        assert_eq!(records[1].class_index, 0);
        assert_eq!(records[2].class_index, 1);
    }

    #[test]
    fn batch_selection_with_empty_pool_picks_ground_truth() {
        let (samples, maps) = toy_batch();
        let enc = EncoderPair::<f64>::mock(5, 32);
        let records = select_for_batch(
            &samples[..1],
            &maps[..1],
            &toy_pools(0),
            &PromptTemplate::default(),
            &enc,
            None,
        )
        .unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].chosen_index, 0);
        assert_eq!(records[0].chosen_name, "thing0");
    }

    #[test]
    fn batch_selection_rejects_missing_maps() {
        let (samples, maps) = toy_batch();
        let enc = EncoderPair::<f64>::mock(5, 32);
        let thin: Vec<ActivationMaps<f64>> = maps
            .iter()
            .map(|m| ActivationMaps {
                values: Tensor3::from_fn(1, 4, 4, |_, y, x| m.values.at(0, y, x)),
                normalized: true,
            })
            .collect();
        let err = select_for_batch(
            &samples[1..],
            &thin[1..],
            &toy_pools(1),
            &PromptTemplate::default(),
            &enc,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Pipeline(_)));
    }

    #[test]
    fn batch_selection_is_deterministic_and_serializable() {
        let (samples, maps) = toy_batch();
        let enc = EncoderPair::<f64>::mock(5, 32);
        let run = || {
            select_for_batch(
                &samples,
                &maps,
                &toy_pools(3),
                &PromptTemplate::default(),
                &enc,
                None,
            )
            .unwrap()
            .iter()
            .map(|r| r.to_json_line())
            .collect::<Vec<_>>()
            .join("\n")
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "serialized record stream must be byte-equal");
        // round trip
        for line in a.lines() {
            let r = SelectionRecord::<f64>::from_json_line(line).unwrap();
            assert_eq!(r.to_json_line(), line);
        }
    }

    #[test]
    fn frequency_counts_ground_truth_choices() {
        let mk = |k: usize, chosen: usize| SelectionRecord {
            image_id: "i".into(),
            class_index: k,
            chosen_index: chosen,
            chosen_name: "n".into(),
            similarities: sim(vec![0.0]),
        };
        let all0: Vec<_> = (0..4).map(|_| mk(0, 0)).collect();
        assert_eq!(selection_frequency(&all0, 2).unwrap()[0], Some(1.0));

        let none0: Vec<_> = (0..4).map(|_| mk(0, 1)).collect();
        assert_eq!(selection_frequency(&none0, 2).unwrap()[0], Some(0.0));

        // 3 of 4 ground truth → 0.75, hand tally
        let mixed = vec![mk(1, 0), mk(1, 0), mk(1, 2), mk(1, 0)];
        let f = selection_frequency(&mixed, 2).unwrap();
        assert_eq!(f[1], Some(0.75));
        assert_eq!(f[0], None, "class without records is absent");

        assert!(selection_frequency::<f64>(&[], 2).is_err());
    }
}
