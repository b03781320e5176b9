//! Run checkpoint: the model plus both margin trackers in one file.
//!
//! Layout: `CMIX`, version byte, step (u64), model section, then one
//! presence byte and margin-table section per tracker (AUM, then APM).

use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::margins::{MarginTable, MarginTracker};
use crate::model::Mlp;

const TAG: &[u8] = b"CMIX";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: Mlp,
    pub aum: Option<MarginTracker>,
    pub apm: Option<MarginTracker>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(TAG);
        w.u8(VERSION);
        w.u64(self.step);
        self.model.encode(&mut w);
        for tracker in [&self.aum, &self.apm] {
            match tracker {
                Some(t) => {
                    w.u8(1);
                    t.snapshot().encode(&mut w);
                }
                None => w.u8(0),
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_tag(TAG)?;
        r.expect_version(VERSION)?;
        let step = r.u64()?;
        let model = Mlp::decode(&mut r)?;
        let mut trackers = [None, None];
        for slot in &mut trackers {
            let at = r.offset();
            *slot = match r.u8()? {
                0 => None,
                1 => Some(MarginTracker::restore(MarginTable::decode(&mut r)?)),
                other => {
                    return Err(Error::format(
                        format!("byte {at}"),
                        format!("bad section flag {other}"),
                    ))
                }
            };
        }
        if !r.is_empty() {
            return Err(r.error("trailing bytes after checkpoint"));
        }
        let [aum, apm] = trackers;
        Ok(Self {
            step,
            model,
            aum,
            apm,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { location, message } => Error::Format {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::SampleId;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(9);
        let model = Mlp::init(&[4, 6, 3], &mut rng).unwrap();
        let mut apm = MarginTracker::apm(3, 0.997).unwrap();
        let mut aum = MarginTracker::aum(3).unwrap();
        for t in 1..=5 {
            for id in 0..4 {
                let z = [rng.normal(), rng.normal(), rng.normal()];
                apm.register(SampleId(id));
                apm.update(SampleId(id), &z, (id % 3) as usize, t).unwrap();
                aum.register(SampleId(id + 10));
                aum.update(SampleId(id + 10), &z, 1, t).unwrap();
            }
        }
        Checkpoint {
            step: 5,
            model,
            aum: Some(aum),
            apm: Some(apm),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);

        let bare = Checkpoint {
            aum: None,
            apm: None,
            ..ck
        };
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn read_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        std::fs::write(&path, b"CMIX\x02").unwrap();
        let err = Checkpoint::read(&path).unwrap_err().to_string();
        assert!(err.contains("ck.bin"), "{err}");
    }
}
