//! Binary dataset format.
//!
//! ```text
//! magic   "CORE2DS\0"                     8 bytes
//! version u16 LE
//! header  u64 LE length + JSON bytes       (DatasetHeader)
//! records N·T × { trajectory u32, step u32, cond_ref u32,
//!                 eps_cond d×f64, eps_uncond d×f64, [x_t d×f64] }
//! ```

use std::path::Path;

use ndarray::Array1;

use super::{Dataset, DatasetHeader, TrajectoryRecord};
use crate::nn::{ByteReader, ByteWriter};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"CORE2DS\0";
pub const DATASET_VERSION: u16 = 1;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    let header = serde_json::to_vec(&ds.header)?;
    w.u64(header.len() as u64);
    w.bytes(&header);
    for r in &ds.records {
        w.u32(r.trajectory);
        w.u32(r.step);
        w.u32(r.cond_ref);
        w.f64s(r.eps_cond.iter());
        w.f64s(r.eps_uncond.iter());
        if let Some(x) = &r.x_t {
            w.f64s(x.iter());
        }
    }
    Ok(w.into_inner())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(8)? != DATASET_MAGIC {
        return Err(Error::BadMagic("dataset"));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let len = r.u64()?;
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflow".into()))?;
    let header: DatasetHeader = serde_json::from_slice(r.bytes(len)?)?;
    header.schedule.validate()?;
    if header.schedule.num_steps() != header.num_steps {
        return Err(Error::Format(
            "schedule length disagrees with header T".into(),
        ));
    }
    let count = header
        .num_trajectories
        .checked_mul(header.num_steps)
        .ok_or_else(|| Error::Format("record count overflow".into()))?;
    let d = header.dim;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let trajectory = r.u32()?;
        let step = r.u32()?;
        let cond_ref = r.u32()?;
        let eps_cond = Array1::from(r.f64s(d)?);
        let eps_uncond = Array1::from(r.f64s(d)?);
        let x_t = if header.store_xt {
            Some(Array1::from(r.f64s(d)?))
        } else {
            None
        };
        records.push(TrajectoryRecord {
            trajectory,
            step,
            cond_ref,
            eps_cond,
            eps_uncond,
            x_t,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record",
            r.remaining()
        )));
    }
    let ds = Dataset { header, records };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` to `path`, returning the number of bytes written.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<usize> {
    let bytes = encode_dataset(ds)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::collect_trajectories;
    use crate::denoiser::{CondTable, OracleModel};
    use crate::gmm::easy_hard_split;
    use crate::schedule::NoiseSchedule;

    fn sample(labels: &[usize], store_xt: bool) -> Dataset {
        let bench = easy_hard_split(0);
        let schedule = NoiseSchedule::vp(28).unwrap();
        let m = OracleModel {
            gmm: bench.gmm,
            schedule: schedule.clone(),
        };
        let c = CondTable::new(4, 8, 32, 1);
        collect_trajectories(&m, &c, labels, &schedule, 1.5, 4, 2, store_xt).unwrap()
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = sample(&[], false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.core2ds");
        let n = write_dataset(&ds, &path).unwrap();
        assert_eq!(n as u64, std::fs::metadata(&path).unwrap().len());
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ds = sample(&[0, 1, 3], true);
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let ds = sample(&[0, 1, 3], false);
        let bytes = encode_dataset(&ds).unwrap();
        let cut = &bytes[..bytes.len() - 100];
        match decode_dataset(cut) {
            Err(Error::Truncated { offset }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn magic_and_version_checked() {
        let ds = sample(&[2], false);
        let mut bytes = encode_dataset(&ds).unwrap();
        bytes[9] = 7;
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::VersionMismatch { found: 0x0701, .. })
        ));
        bytes[0] = b'Z';
        assert!(matches!(decode_dataset(&bytes), Err(Error::BadMagic(_))));
        let mut long = encode_dataset(&ds).unwrap();
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_dataset("/nonexistent/none.core2ds"),
            Err(Error::Io(_))
        ));
    }
}
