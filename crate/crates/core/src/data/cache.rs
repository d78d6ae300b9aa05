use std::fs;
use std::path::Path;

use super::{Basket, BasketDataset, DataError, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"NBRC";
pub const CACHE_VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a dataset into the cache layout.
pub fn encode_cache(ds: &BasketDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.push(CACHE_VERSION);
    out.extend_from_slice(&(ds.n_users() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.n_items() as u64).to_le_bytes());
    for history in ds.histories() {
        put_u32(&mut out, history.len());
        for basket in history {
            put_u32(&mut out, basket.len());
            for &i in basket {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
    }
    for s in ds.user_ids().iter().chain(ds.item_ids()) {
        put_str(&mut out, s);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DataError::BadCache(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DataError::BadCache("id is not utf-8".into()))
    }
}

pub fn decode_cache(buf: &[u8]) -> Result<BasketDataset> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(DataError::BadCache("wrong magic".into()));
    }
    let version = c.take(1)?[0];
    if version != CACHE_VERSION {
        return Err(DataError::BadCache(format!("unsupported version {version}")));
    }
    let n_users = c.u64()? as usize;
    let n_items = c.u64()? as usize;
    let mut histories = Vec::with_capacity(n_users.min(buf.len()));
    for _ in 0..n_users {
        let n_baskets = c.u32()? as usize;
        let mut history = Vec::with_capacity(n_baskets.min(buf.len()));
        for _ in 0..n_baskets {
            let len = c.u32()? as usize;
            let basket: Basket = (0..len).map(|_| c.u32()).collect::<Result<_>>()?;
            history.push(basket);
        }
        histories.push(history);
    }
    let user_ids = (0..n_users).map(|_| c.string()).collect::<Result<_>>()?;
    let item_ids = (0..n_items).map(|_| c.string()).collect::<Result<_>>()?;
    if c.pos != buf.len() {
        return Err(DataError::BadCache(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    BasketDataset::with_ids(n_items, histories, user_ids, item_ids).map_err(|e| DataError::BadCache(e.to_string()))
}

pub fn write_cache(path: &Path, ds: &BasketDataset) -> Result<()> {
    fs::write(path, encode_cache(ds)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_cache(path: &Path) -> Result<BasketDataset> {
    let buf = fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_cache(&buf)
}
