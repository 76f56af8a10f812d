//! Problem-instance files.
//!
//! Layout:
//!
//! ```text
//! FEDPLT-DATA 1\n
//! {"n":5,"seed":1,"regularizer":"l2","nonsmooth":"zero","agents":[{"kind":"logistic","q":50},..]}\n
//! <payload: little-endian f64 words>
//! ```
//!
//! The payload starts with the regularizer weight and the nonsmooth weight,
//! followed by each agent in order: logistic agents store `q` records of
//! `n` features and the label; quadratic agents store the curvature and the
//! `n` center coordinates. All reals live in the payload so a write/read
//! cycle is bit-exact.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::problem::{
    DataPoint, LocalCost, LocalDataset, NonsmoothSpec, ProblemInstance, QuadraticCost,
    RegularizerSpec,
};
use crate::vector::ModelVector;

const MAGIC: &str = "FEDPLT-DATA 1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    n: usize,
    seed: Option<u64>,
    regularizer: String,
    nonsmooth: String,
    agents: Vec<AgentHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AgentHeader {
    Logistic { q: usize },
    Quadratic,
}

fn format_err(msg: impl Into<String>) -> FedError {
    FedError::Format(msg.into())
}

pub fn write_instance<W: Write>(p: &ProblemInstance, mut w: W) -> Result<()> {
    let (reg_kind, reg_weight) = match p.regularizer {
        RegularizerSpec::None => ("none", 0.0),
        RegularizerSpec::L2 { weight } => ("l2", weight),
        RegularizerSpec::NonconvexRational { weight } => ("nonconvex_rational", weight),
    };
    let (ns_kind, ns_weight) = match p.nonsmooth {
        NonsmoothSpec::Zero => ("zero", 0.0),
        NonsmoothSpec::L1 { weight } => ("l1", weight),
    };
    let header = Header {
        n: p.n,
        seed: p.seed,
        regularizer: reg_kind.to_string(),
        nonsmooth: ns_kind.to_string(),
        agents: p
            .agents
            .iter()
            .map(|a| match a {
                LocalCost::Logistic(d) => AgentHeader::Logistic { q: d.len() },
                LocalCost::Quadratic(_) => AgentHeader::Quadratic,
            })
            .collect(),
    };
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut w, &header).map_err(|e| format_err(e.to_string()))?;
    writeln!(w)?;

    let mut payload = Vec::new();
    let mut put = |v: f64| payload.extend_from_slice(&v.to_le_bytes());
    put(reg_weight);
    put(ns_weight);
    for a in &p.agents {
        match a {
            LocalCost::Logistic(d) => {
                for pt in &d.points {
                    pt.features.iter().for_each(|&f| put(f));
                    put(pt.label);
                }
            }
            LocalCost::Quadratic(q) => {
                put(q.curvature);
                q.center.iter().for_each(|&c| put(c));
            }
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_instance<R: BufRead>(mut r: R) -> Result<ProblemInstance> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(format_err("missing FEDPLT-DATA magic line"));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| format_err(e.to_string()))?;

    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(format_err("payload is not a whole number of f64 words"));
    }
    let mut words = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut next = || words.next().ok_or_else(|| format_err("payload ended early"));

    let reg_weight = next()?;
    let ns_weight = next()?;
    let regularizer = match header.regularizer.as_str() {
        "none" => RegularizerSpec::None,
        "l2" => RegularizerSpec::L2 { weight: reg_weight },
        "nonconvex_rational" => RegularizerSpec::NonconvexRational { weight: reg_weight },
        other => return Err(format_err(format!("unknown regularizer kind {other:?}"))),
    };
    let nonsmooth = match header.nonsmooth.as_str() {
        "zero" => NonsmoothSpec::Zero,
        "l1" => NonsmoothSpec::L1 { weight: ns_weight },
        other => return Err(format_err(format!("unknown nonsmooth kind {other:?}"))),
    };

    let n = header.n;
    let mut agents = Vec::with_capacity(header.agents.len());
    for (id, a) in header.agents.iter().enumerate() {
        match *a {
            AgentHeader::Logistic { q } => {
                let mut points = Vec::with_capacity(q);
                for _ in 0..q {
                    let features = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
                    let label = next()?;
                    points.push(DataPoint::new(features, label)?);
                }
                agents.push(LocalCost::Logistic(LocalDataset::new(id, points)?));
            }
            AgentHeader::Quadratic => {
                let curvature = next()?;
                let center = (0..n).map(|_| next()).collect::<Result<Vec<_>>>()?;
                agents.push(LocalCost::Quadratic(QuadraticCost {
                    center: ModelVector::new(center),
                    curvature,
                }));
            }
        }
    }
    if next().is_ok() {
        return Err(format_err("trailing data after the last agent"));
    }
    let mut p = ProblemInstance::new(agents, regularizer, nonsmooth)?;
    p.seed = header.seed;
    Ok(p)
}

pub fn save_instance(p: &ProblemInstance, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_instance(p, &mut buf)?;
    write_atomically(path, &buf)
}

pub fn load_instance(path: &Path) -> Result<ProblemInstance> {
    let f = std::fs::File::open(path)?;
    read_instance(std::io::BufReader::new(f))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomically(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::logistic_instance;

    fn roundtrip(p: &ProblemInstance) -> ProblemInstance {
        let mut buf = Vec::new();
        write_instance(p, &mut buf).unwrap();
        read_instance(&buf[..]).unwrap()
    }

    #[test]
    fn logistic_instance_roundtrips_bit_exactly() {
        let p = logistic_instance(
            11,
            3,
            4,
            7,
            RegularizerSpec::L2 { weight: 0.5 },
            NonsmoothSpec::L1 { weight: 0.1 },
        )
        .unwrap();
        let back = roundtrip(&p);
        assert_eq!(back, p);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_instance(&p, &mut a).unwrap();
        write_instance(&back, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quadratic_instance_roundtrips() {
        let p = ProblemInstance::quadratic(
            vec![ModelVector::new(vec![1.0 / 3.0]), ModelVector::new(vec![-1.0])],
            vec![1.0, 3.0],
            NonsmoothSpec::Zero,
        )
        .unwrap();
        assert_eq!(roundtrip(&p), p);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let p = logistic_instance(1, 2, 2, 3, RegularizerSpec::L2 { weight: 0.5 }, NonsmoothSpec::Zero)
            .unwrap();
        let mut buf = Vec::new();
        write_instance(&p, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(read_instance(&buf[..]), Err(FedError::Format(_))));
        assert!(read_instance(&b"garbage\n"[..]).is_err());
    }
}
