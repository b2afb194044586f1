//! Little-endian binary encoding shared by checkpoints and embedder files.
//!
//! A parameter section is
//!
//! ```text
//! u32 fingerprint length, fingerprint bytes (UTF-8)
//! u32 record count
//! per record: u32 name length, name bytes (UTF-8),
//!             u32 ndim (= 4), ndim × u32 dims,
//!             prod(dims) scalars (4 or 8 bytes each, per the file's dtype tag)
//! ```

use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::Scalar;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_store<T: Scalar>(out: &mut Vec<u8>, store: &ParamStore<T>) {
    put_str(out, store.fingerprint());
    put_u32(out, store.len() as u32);
    for (name, t) in store.iter() {
        put_str(out, name);
        put_u32(out, 4);
        for d in t.shape() {
            put_u32(out, d as u32);
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

/// Cursor over a byte buffer; every read reports truncation as an error.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.remaining() < n {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, String> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| "invalid UTF-8 string".to_string())
    }

    pub(crate) fn store<T: Scalar>(&mut self) -> Result<ParamStore<T>, String> {
        let fingerprint = self.string()?;
        let count = self.u32()? as usize;
        let mut store = ParamStore::new(fingerprint);
        let width = T::TAG as usize;
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.u32()? as usize;
            if ndim != 4 {
                return Err(format!("record {name}: expected 4 dims, found {ndim}"));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = self.u32()? as usize;
            }
            let n: usize = shape.iter().product();
            let raw = self.bytes(n.checked_mul(width).ok_or("record size overflow")?)?;
            let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(format!("record {name}: non-finite value"));
            }
            let tensor = Tensor::from_vec(shape, data).map_err(|e| e.to_string())?;
            if store.get(&name).is_some() {
                return Err(format!("duplicate record {name}"));
            }
            store.insert(name, tensor);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_round_trip_and_truncation() {
        let mut s = ParamStore::<f32>::new("demo/1");
        s.insert("a", Tensor::from_vec([1, 2, 1, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        s.insert("b", Tensor::scalar(7.0));
        let mut buf = Vec::new();
        put_store(&mut buf, &s);
        let back: ParamStore<f32> = Reader::new(&buf).store().unwrap();
        assert_eq!(back, s);
        for cut in [0, 3, buf.len() / 2, buf.len() - 1] {
            assert!(Reader::new(&buf[..cut]).store::<f32>().is_err());
        }
    }
}
