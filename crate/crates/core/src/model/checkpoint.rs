//! Checkpoint files.
//!
//! Layout: magic `NODR` | version u16 LE | header length u32 LE | UTF-8 JSON
//! header `{"arch": .., "params": [{"name", "shape"}, ..]}` | every parameter
//! array as f64 LE, concatenated in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, ModelError, ParamLayout, Result, VelocityModel};

pub const MAGIC: &[u8; 4] = b"NODR";
pub const VERSION: u16 = 1;

const PREFIX: usize = 4 + 2 + 4;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: Arch,
    params: Vec<Entry>,
}

pub fn write_checkpoint<W: Write>(model: &VelocityModel, mut w: W) -> Result<()> {
    let header = Header {
        arch: model.arch().clone(),
        params: model
            .layout()
            .specs()
            .iter()
            .map(|s| Entry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Header(e.to_string()))?;
    let mut buf = Vec::with_capacity(PREFIX + json.len() + model.params().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(model: &VelocityModel, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

/// Parses a checkpoint held in memory.
pub fn read_checkpoint(bytes: &[u8]) -> Result<VelocityModel> {
    if bytes.len() < 4 {
        return Err(ModelError::Truncated {
            expected: PREFIX,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(ModelError::BadMagic(bytes[..4].to_vec()));
    }
    if bytes.len() < PREFIX {
        return Err(ModelError::Truncated {
            expected: PREFIX,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = PREFIX + hlen;
    if bytes.len() < body {
        return Err(ModelError::Truncated {
            expected: body,
            actual: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX..body])
        .map_err(|e| ModelError::Header(e.to_string()))?;
    header.arch.validate()?;

    let layout = ParamLayout::for_arch(&header.arch);
    if layout.specs().len() != header.params.len() {
        return Err(ModelError::LayoutMismatch(format!(
            "{} arrays listed, architecture has {}",
            header.params.len(),
            layout.specs().len()
        )));
    }
    for (spec, entry) in layout.specs().iter().zip(&header.params) {
        if spec.name != entry.name || spec.shape != entry.shape {
            return Err(ModelError::LayoutMismatch(format!(
                "{} {:?} listed where {} {:?} expected",
                entry.name, entry.shape, spec.name, spec.shape
            )));
        }
    }
    let expected = body + layout.total() * 8;
    if bytes.len() < expected {
        return Err(ModelError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(ModelError::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }
    let params = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    VelocityModel::from_parts(header.arch, params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VelocityModel> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::super::Mode;
    use super::*;

    fn model() -> VelocityModel {
        let mut arch = Arch::new(Mode::Latent, vec![8, 8]);
        arch.latent_factor = 2;
        arch.conv_channels = vec![3];
        arch.hidden_width = 5;
        arch.embed_width = 3;
        VelocityModel::init(arch, 4).unwrap()
    }

    fn bytes(m: &VelocityModel) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(m, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let b = bytes(&m);
        let back = read_checkpoint(&b).unwrap();
        assert_eq!(back, m);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn prefix_layout() {
        let b = bytes(&model());
        assert_eq!(&b[..4], b"NODR");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        let hlen = u32::from_le_bytes(b[6..10].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&b[10..10 + hlen]).unwrap();
        assert_eq!(header["params"][0]["name"], "conv0.weight");
        assert_eq!(header["arch"]["mode"], "latent");
    }

    #[test]
    fn bad_magic() {
        let mut b = bytes(&model());
        b[0] = b'X';
        assert!(matches!(read_checkpoint(&b), Err(ModelError::BadMagic(_))));
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let b = bytes(&model());
        let n = b.len();
        match read_checkpoint(&b[..n - 3]) {
            Err(ModelError::Truncated { expected, actual }) => {
                assert_eq!(expected, n);
                assert_eq!(actual, n - 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_checkpoint(&b[..7]),
            Err(ModelError::Truncated {
                expected: 10,
                actual: 7
            })
        ));
    }

    #[test]
    fn shape_mismatch_and_trailing_bytes() {
        let m = model();
        let b = bytes(&m);
        let hlen = u32::from_le_bytes(b[6..10].try_into().unwrap()) as usize;
        let text = String::from_utf8(b[10..10 + hlen].to_vec()).unwrap();
        let bad = text.replacen("\"shape\":[3,2,3,3]", "\"shape\":[3,2,3,4]", 1);
        assert_ne!(bad, text);
        let mut c = b[..6].to_vec();
        c.extend_from_slice(&(bad.len() as u32).to_le_bytes());
        c.extend_from_slice(bad.as_bytes());
        c.extend_from_slice(&b[10 + hlen..]);
        assert!(matches!(
            read_checkpoint(&c),
            Err(ModelError::LayoutMismatch(_))
        ));

        let mut long = b.clone();
        long.push(0);
        assert!(matches!(
            read_checkpoint(&long),
            Err(ModelError::TrailingBytes { .. })
        ));
    }

    #[test]
    fn forward_survives_round_trip() {
        let m = model();
        let back = read_checkpoint(&bytes(&m)).unwrap();
        let s = crate::grid::VectorGrid::from_fn(vec![4, 4], |i, o| {
            o[0] = i[0] as f64 * 0.1;
            o[1] = -(i[1] as f64) * 0.2;
        })
        .unwrap();
        assert_eq!(
            m.velocity_forward(&s, 0.3).unwrap(),
            back.velocity_forward(&s, 0.3).unwrap()
        );
    }
}
