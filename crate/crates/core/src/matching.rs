//! Teacher galleries and the student-to-teacher match store.
//!
//! Every student sample is paired with one teacher sample of its own class.
//! The first pairing comes from matcher-embedding cosine similarity; later
//! pairings come from prediction agreement under a temperature, recomputed
//! on a widening epoch schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_tensor, write_tensor, DType};
use crate::error::{Error, Result};
use crate::losses::kl_divergence;
use crate::nets::{Classifier, Matcher, Modality};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_index(scores: &[f64]) -> Result<usize> {
    select(scores, |a, b| a > b)
}

/// Index of the smallest score; ties go to the lowest index.
pub fn argmin_index(scores: &[f64]) -> Result<usize> {
    select(scores, |a, b| a < b)
}

fn select(scores: &[f64], better: impl Fn(f64, f64) -> bool) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::param("cannot select from an empty score list"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if better(s, scores[best]) {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGallery {
    /// `[K, d_e]` unit-norm matcher embeddings.
    pub embeddings: Tensor,
    /// `[K, C]` teacher logits.
    pub logits: Tensor,
    /// Dataset index of each entry.
    pub sample_ids: Vec<usize>,
}

impl ClassGallery {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryPair {
    pub classes: Vec<ClassGallery>,
}

#[derive(Serialize, Deserialize)]
struct GalleryIndex {
    classes: usize,
    sample_ids: Vec<Vec<usize>>,
}

impl GalleryPair {
    /// Group precomputed rows by class. `membership[r]` lists the classes of
    /// row `r`; a row with several classes is copied into each.
    pub fn from_outputs(
        embeddings: &Tensor,
        logits: &Tensor,
        membership: &[Vec<usize>],
        sample_ids: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let [m, de] = embeddings.dims2()?;
        let [ml, c] = logits.dims2()?;
        if ml != m || membership.len() != m || sample_ids.len() != m {
            return Err(Error::dim(format!(
                "gallery rows: {m} embeddings, {ml} logits, {} label sets, {} ids",
                membership.len(),
                sample_ids.len()
            )));
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (r, labels) in membership.iter().enumerate() {
            for &l in labels {
                if l >= classes {
                    return Err(Error::param(format!("label {l} out of range for {classes} classes")));
                }
                rows[l].push(r);
            }
        }
        let mut out = Vec::with_capacity(classes);
        for (cls, idx) in rows.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Contract(format!("class {cls} has no teacher samples")));
            }
            out.push(ClassGallery {
                embeddings: embeddings.select_rows(idx),
                logits: logits.select_rows(idx),
                sample_ids: idx.iter().map(|&r| sample_ids[r]).collect(),
            });
            debug_assert_eq!(out[cls].embeddings.shape(), &[idx.len(), de]);
            debug_assert_eq!(out[cls].logits.shape(), &[idx.len(), c]);
        }
        Ok(GalleryPair { classes: out })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> Result<&ClassGallery> {
        self.classes
            .get(c)
            .ok_or_else(|| Error::Contract(format!("class {c} is absent from the galleries")))
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.classes.iter().map(ClassGallery::len).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (c, g) in self.classes.iter().enumerate() {
            write_tensor(&dir.join(format!("g1_c{c}.sbt")), &g.embeddings, DType::F64)?;
            write_tensor(&dir.join(format!("g2_c{c}.sbt")), &g.logits, DType::F64)?;
        }
        let index = GalleryIndex {
            classes: self.classes.len(),
            sample_ids: self.classes.iter().map(|g| g.sample_ids.clone()).collect(),
        };
        write_json(&dir.join("galleries.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: GalleryIndex = read_json(&dir.join("galleries.json"), "gallery index")?;
        if index.sample_ids.len() != index.classes {
            return Err(Error::Contract("gallery index class count mismatch".into()));
        }
        let mut classes = Vec::with_capacity(index.classes);
        for (c, ids) in index.sample_ids.into_iter().enumerate() {
            let embeddings = read_tensor(&dir.join(format!("g1_c{c}.sbt")))?;
            let logits = read_tensor(&dir.join(format!("g2_c{c}.sbt")))?;
            if embeddings.rank() != 2 || logits.rank() != 2 || embeddings.shape()[0] != ids.len() || logits.shape()[0] != ids.len() {
                return Err(Error::Contract(format!("class {c} gallery files disagree with the index")));
            }
            classes.push(ClassGallery {
                embeddings,
                logits,
                sample_ids: ids,
            });
        }
        Ok(GalleryPair { classes })
    }
}

/// Embed and classify every teacher image, then group by class.
pub fn build_galleries(
    teacher: &Classifier,
    matcher: &Matcher,
    ms_images: &Tensor,
    membership: &[Vec<usize>],
    sample_ids: &[usize],
) -> Result<GalleryPair> {
    let embeddings = matcher.infer(Modality::Ms, ms_images)?;
    let logits = teacher.infer(ms_images)?.logits;
    GalleryPair::from_outputs(&embeddings, &logits, membership, sample_ids, teacher.config().classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchOrigin {
    Ssm,
    Dynm,
    Random,
}

/// Which end of the agreement score re-matching picks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DynmRule {
    /// Most agreeable teacher (smallest divergence).
    #[default]
    Argmin,
    /// Least agreeable teacher.
    Argmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchStore {
    /// Class of each student sample.
    pub classes: Vec<usize>,
    /// Gallery index within that class for each student sample.
    pub assignment: Vec<usize>,
    pub epoch_created: usize,
    pub origin: MatchOrigin,
}

#[derive(Serialize, Deserialize)]
struct MatchIndex {
    students: usize,
    epoch_created: usize,
    origin: MatchOrigin,
}

impl MatchStore {
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Dataset index of the teacher sample paired with student `n`.
    pub fn teacher_sample(&self, galleries: &GalleryPair, n: usize) -> usize {
        galleries.classes[self.classes[n]].sample_ids[self.assignment[n]]
    }

    pub fn teacher_samples(&self, galleries: &GalleryPair) -> Vec<usize> {
        (0..self.len()).map(|n| self.teacher_sample(galleries, n)).collect()
    }

    /// Teacher logits of every paired sample, `[N, C]`.
    pub fn teacher_logits(&self, galleries: &GalleryPair) -> Tensor {
        let rows: Vec<Tensor> = (0..self.len())
            .map(|n| {
                let g = &galleries.classes[self.classes[n]];
                g.logits.select_rows(&[self.assignment[n]])
            })
            .collect();
        crate::nets::concat_rows(&rows).expect("non-empty store")
    }

    pub fn validate(&self, galleries: &GalleryPair) -> Result<()> {
        if self.classes.len() != self.assignment.len() {
            return Err(Error::Contract("match store class and assignment lengths differ".into()));
        }
        for (n, (&c, &k)) in self.classes.iter().zip(&self.assignment).enumerate() {
            let g = galleries.class(c)?;
            if k >= g.len() {
                return Err(Error::Contract(format!(
                    "student {n}: gallery index {k} out of range for class {c} ({} entries)",
                    g.len()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut pairs = Vec::with_capacity(2 * self.len());
        for (&c, &k) in self.classes.iter().zip(&self.assignment) {
            pairs.push(c as f64);
            pairs.push(k as f64);
        }
        let t = Tensor::new(vec![self.len(), 2], pairs)?;
        write_tensor(&dir.join("assignment.sbt"), &t, DType::F64)?;
        let index = MatchIndex {
            students: self.len(),
            epoch_created: self.epoch_created,
            origin: self.origin,
        };
        write_json(&dir.join("match.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: MatchIndex = read_json(&dir.join("match.json"), "match index")?;
        let t = read_tensor(&dir.join("assignment.sbt"))?;
        if t.shape() != [index.students, 2] {
            return Err(Error::Contract(format!(
                "assignment tensor {:?} disagrees with {} students",
                t.shape(),
                index.students
            )));
        }
        let (classes, assignment) = t.data().chunks(2).map(|p| (p[0] as usize, p[1] as usize)).unzip();
        Ok(MatchStore {
            classes,
            assignment,
            epoch_created: index.epoch_created,
            origin: index.origin,
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn check_students(rows: &Tensor, labels: &[usize], what: &str) -> Result<usize> {
    let [n, d] = rows.dims2()?;
    if n != labels.len() {
        return Err(Error::dim(format!("{n} student {what} for {} labels", labels.len())));
    }
    Ok(d)
}

/// Cosine-similarity matching of student embeddings `[N, d_e]` against the
/// embedding gallery of each student's class.
pub fn ssm_match(galleries: &GalleryPair, student_embeddings: &Tensor, labels: &[usize], epoch: usize) -> Result<MatchStore> {
    check_students(student_embeddings, labels, "embeddings")?;
    let mut assignment = Vec::with_capacity(labels.len());
    for (n, &c) in labels.iter().enumerate() {
        let g = galleries.class(c)?;
        let s = student_embeddings.row(n);
        let scores: Vec<f64> = (0..g.len()).map(|k| cosine(s, g.embeddings.row(k))).collect();
        assignment.push(argmax_index(&scores)?);
    }
    Ok(MatchStore {
        classes: labels.to_vec(),
        assignment,
        epoch_created: epoch,
        origin: MatchOrigin::Ssm,
    })
}

/// Prediction-agreement matching: score `KL(softmax(p_S/γ) ‖ softmax(p_T/γ))`
/// against every teacher logit vector of the student's class.
pub fn dynm_match(
    galleries: &GalleryPair,
    student_logits: &Tensor,
    labels: &[usize],
    gamma: f64,
    rule: DynmRule,
    epoch: usize,
) -> Result<MatchStore> {
    check_students(student_logits, labels, "logit rows")?;
    let mut assignment = Vec::with_capacity(labels.len());
    for (n, &c) in labels.iter().enumerate() {
        let g = galleries.class(c)?;
        let p = student_logits.row(n);
        let scores = (0..g.len())
            .map(|k| kl_divergence(p, g.logits.row(k), gamma))
            .collect::<Result<Vec<f64>>>()?;
        assignment.push(match rule {
            DynmRule::Argmin => argmin_index(&scores)?,
            DynmRule::Argmax => argmax_index(&scores)?,
        });
    }
    Ok(MatchStore {
        classes: labels.to_vec(),
        assignment,
        epoch_created: epoch,
        origin: MatchOrigin::Dynm,
    })
}

/// Uniformly random within-class pairing.
pub fn random_match(galleries: &GalleryPair, labels: &[usize], rng: &mut Rng, epoch: usize) -> Result<MatchStore> {
    let mut assignment = Vec::with_capacity(labels.len());
    for &c in labels {
        assignment.push(rng.below(galleries.class(c)?.len()));
    }
    Ok(MatchStore {
        classes: labels.to_vec(),
        assignment,
        epoch_created: epoch,
        origin: MatchOrigin::Random,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefreshSchedule {
    pub e0: usize,
    pub delta_e: usize,
    pub e_mu: usize,
    pub horizon: usize,
}

impl Default for RefreshSchedule {
    fn default() -> Self {
        RefreshSchedule {
            e0: 10,
            delta_e: 10,
            e_mu: 5,
            horizon: 200,
        }
    }
}

/// `e_t = e0 + Σ_{i=1..t} (Δe + e_μ(i − 1))` for `t ≥ 1`, kept while below
/// the horizon, with repeats removed.
pub fn refresh_epochs(s: &RefreshSchedule) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    let mut e = s.e0;
    for t in 1usize.. {
        e += s.delta_e + s.e_mu * (t - 1);
        if e >= s.horizon {
            break;
        }
        if out.last() != Some(&e) {
            out.push(e);
        }
        if s.delta_e == 0 && s.e_mu == 0 {
            break;
        }
    }
    out
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing {
            what,
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
