use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Request, WorkloadError};
use crate::rng::{keyed, name_salt, Purpose};

/// Uniform integer prompt length in `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptLenSpec {
    pub min: u32,
    pub max: u32,
}

/// Lognormal response length truncated to `[.., cap]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthSpec {
    pub mu: f64,
    pub sigma: f64,
    pub cap: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSpec {
    pub a: f64,
    pub b: f64,
}

impl BetaSpec {
    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

/// Parameters of a synthetic rollout batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub batch_size: usize,
    pub prompt_len: PromptLenSpec,
    pub true_len: LengthSpec,
    /// Per drafting method, the Beta distribution of per-request acceptance.
    pub methods: BTreeMap<String, BetaSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl TraceSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |field: &str, reason: String| WorkloadError::Config {
            field: field.into(),
            reason,
        };
        let l = &self.true_len;
        if !(l.sigma > 0.0 && l.sigma.is_finite()) {
            return Err(bad("true_len.sigma", format!("must be positive, got {}", l.sigma)));
        }
        if !l.mu.is_finite() {
            return Err(bad("true_len.mu", format!("must be finite, got {}", l.mu)));
        }
        if l.cap < 1 {
            return Err(bad("true_len.cap", "must be at least 1".into()));
        }
        let p = &self.prompt_len;
        if p.min < 1 || p.min > p.max {
            return Err(bad(
                "prompt_len",
                format!("need 1 <= min <= max, got [{}, {}]", p.min, p.max),
            ));
        }
        for (name, beta) in &self.methods {
            if !(beta.a > 0.0 && beta.a.is_finite()) {
                return Err(bad(&format!("methods.{name}.a"), format!("must be positive, got {}", beta.a)));
            }
            if !(beta.b > 0.0 && beta.b.is_finite()) {
                return Err(bad(&format!("methods.{name}.b"), format!("must be positive, got {}", beta.b)));
            }
        }
        Ok(())
    }
}

/// Generates `spec.batch_size` requests. Each request draws from its own
/// keyed streams, so the trace is a pure function of the spec.
pub fn gen_trace(spec: &TraceSpec) -> Result<Vec<Request>, WorkloadError> {
    spec.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let l = &spec.true_len;
    let cap = f64::from(l.cap);
    // Inverse-CDF sampling restricted to [0, F(cap)].
    let upper = normal.cdf((cap.ln() - l.mu) / l.sigma);
    let betas: Vec<(&String, Beta<f64>)> = spec
        .methods
        .iter()
        .map(|(name, b)| (name, Beta::new(b.a, b.b).expect("validated beta")))
        .collect();

    let mut out = Vec::with_capacity(spec.batch_size);
    for i in 0..spec.batch_size {
        let id = i as u64;
        let mut rng = keyed(spec.seed, id, Purpose::TraceLength, 0);
        let u: f64 = rng.random::<f64>() * upper;
        let true_len = if u <= 0.0 {
            1
        } else {
            let x = (l.mu + l.sigma * normal.inverse_cdf(u)).exp();
            (x.round() as u32).clamp(1, l.cap)
        };
        let prompt_len = rng.random_range(spec.prompt_len.min..=spec.prompt_len.max);
        let latent_accept = betas
            .iter()
            .map(|(name, beta)| {
                let mut r = keyed(spec.seed, id, Purpose::TraceAccept, name_salt(name));
                ((*name).clone(), beta.sample(&mut r))
            })
            .collect();
        out.push(Request::new(id, prompt_len, true_len, latent_accept)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    id: i64,
    prompt_len: i64,
    true_len: i64,
    accept: BTreeMap<String, f64>,
}

pub fn write_trace<W: Write>(requests: &[Request], mut w: W) -> Result<(), WorkloadError> {
    for r in requests {
        let rec = TraceRecord {
            id: r.id as i64,
            prompt_len: i64::from(r.prompt_len),
            true_len: i64::from(r.true_len),
            accept: r.latent_accept.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(requests: &[Request], path: &Path) -> Result<(), WorkloadError> {
    write_trace(requests, BufWriter::new(File::create(path)?))
}

pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<Request>, WorkloadError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        let invalid = |reason: String| WorkloadError::Validation {
            line: line_no,
            reason,
        };
        if rec.id < 0 {
            return Err(invalid(format!("negative id {}", rec.id)));
        }
        if rec.true_len < 1 || rec.true_len > i64::from(u32::MAX) {
            return Err(invalid(format!("true_len {} must be a positive count", rec.true_len)));
        }
        if rec.prompt_len < 0 || rec.prompt_len > i64::from(u32::MAX) {
            return Err(invalid(format!("prompt_len {} must be a non-negative count", rec.prompt_len)));
        }
        if let Some((m, p)) = rec.accept.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("acceptance probability {p} for `{m}` outside [0, 1]")));
        }
        if !seen.insert(rec.id) {
            return Err(invalid(format!("duplicate request id {}", rec.id)));
        }
        let req = Request::new(rec.id as u64, rec.prompt_len as u32, rec.true_len as u32, rec.accept)
            .map_err(|e| invalid(e.to_string()))?;
        out.push(req);
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<Request>, WorkloadError> {
    parse_trace(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(batch: usize) -> TraceSpec {
        TraceSpec {
            batch_size: batch,
            prompt_len: PromptLenSpec { min: 64, max: 512 },
            true_len: LengthSpec {
                mu: 7.0,
                sigma: 1.0,
                cap: 20480,
            },
            methods: BTreeMap::from([
                ("ngram".to_string(), BetaSpec { a: 2.0, b: 5.0 }),
                ("0.5B".to_string(), BetaSpec { a: 8.0, b: 2.0 }),
            ]),
            seed: 42,
        }
    }

    #[test]
    fn empty_batch() {
        assert!(gen_trace(&spec(0)).unwrap().is_empty());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = gen_trace(&spec(50)).unwrap();
        let b = gen_trace(&spec(50)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(50);
        other.seed = 43;
        assert_ne!(a, gen_trace(&other).unwrap());
    }

    #[test]
    fn prefix_stable_when_batch_grows() {
        let small = gen_trace(&spec(10)).unwrap();
        let large = gen_trace(&spec(20)).unwrap();
        assert_eq!(&large[..10], &small[..]);
    }

    #[test]
    fn lengths_within_bounds() {
        let mut s = spec(2000);
        s.true_len.cap = 3000;
        for r in gen_trace(&s).unwrap() {
            assert!(r.true_len >= 1 && r.true_len <= 3000);
            assert!((64..=512).contains(&r.prompt_len));
            assert_eq!(r.latent_accept.len(), 2);
        }
    }

    #[test]
    fn tiny_cap_does_not_hang() {
        let mut s = spec(10);
        s.true_len.cap = 1;
        assert!(gen_trace(&s).unwrap().iter().all(|r| r.true_len == 1));
    }

    #[test]
    fn invalid_parameters_name_the_field() {
        let mut s = spec(3);
        s.true_len.sigma = 0.0;
        let err = gen_trace(&s).unwrap_err().to_string();
        assert!(err.contains("true_len.sigma"), "{err}");

        let mut s = spec(3);
        s.methods.insert("bad".into(), BetaSpec { a: -1.0, b: 1.0 });
        let err = gen_trace(&s).unwrap_err().to_string();
        assert!(err.contains("methods.bad.a"), "{err}");

        let mut s = spec(3);
        s.true_len.cap = 0;
        assert!(gen_trace(&s).unwrap_err().to_string().contains("true_len.cap"));
    }

    #[test]
    fn save_load_round_trip() {
        let trace = gen_trace(&spec(3)).unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let back = parse_trace(buf.as_slice()).unwrap();
        assert_eq!(trace, back);
    }

    #[test]
    fn negative_length_rejected() {
        let text = "{\"id\":0,\"prompt_len\":3,\"true_len\":5,\"accept\":{}}\n{\"id\":1,\"prompt_len\":3,\"true_len\":-2,\"accept\":{}}\n";
        match parse_trace(text.as_bytes()) {
            Err(WorkloadError::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn probability_above_one_rejected() {
        let text = "{\"id\":0,\"prompt_len\":3,\"true_len\":5,\"accept\":{\"d\":1.5}}\n";
        assert!(matches!(
            parse_trace(text.as_bytes()),
            Err(WorkloadError::Validation { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = "{\"id\":4,\"prompt_len\":3,\"true_len\":5,\"accept\":{}}\n{\"id\":4,\"prompt_len\":3,\"true_len\":5,\"accept\":{}}\n";
        let err = parse_trace(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":0,\"prompt_len\":3,\"true_len\":5,\"accept\":{}}\n\nnot json\n";
        assert!(matches!(
            parse_trace(text.as_bytes()),
            Err(WorkloadError::Parse { line: 3, .. })
        ));
    }
}
