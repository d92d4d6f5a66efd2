//! Sparse byte-addressed physical memory backing DRAM and device windows.

use std::collections::HashMap;

use crate::ids::MemRange;

const PAGE: u64 = 0x1000;

#[derive(Clone, Debug, Default)]
pub struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE as usize]>>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_byte(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr / PAGE))
            .map_or(0, |p| p[(addr % PAGE) as usize])
    }

    pub fn write_byte(&mut self, addr: u64, value: u8) {
        let page = self
            .pages
            .entry(addr / PAGE)
            .or_insert_with(|| Box::new([0; PAGE as usize]));
        page[(addr % PAGE) as usize] = value;
    }

    /// Little-endian read of `width` bytes.
    pub fn read(&self, addr: u64, width: u8) -> u64 {
        (0..width as u64).fold(0, |acc, i| {
            acc | (self.read_byte(addr + i) as u64) << (8 * i)
        })
    }

    pub fn write(&mut self, addr: u64, width: u8, value: u64) {
        for i in 0..width as u64 {
            self.write_byte(addr + i, (value >> (8 * i)) as u8);
        }
    }

    pub fn zero(&mut self, range: MemRange) {
        let mut page = range.base / PAGE;
        while page * PAGE < range.end() {
            if let Some(p) = self.pages.get_mut(&page) {
                let start = range.base.max(page * PAGE) - page * PAGE;
                let end = range.end().min((page + 1) * PAGE) - page * PAGE;
                p[start as usize..end as usize].fill(0);
            }
            page += 1;
        }
    }

    pub fn is_zero(&self, range: MemRange) -> bool {
        let mut page = range.base / PAGE;
        while page * PAGE < range.end() {
            if let Some(p) = self.pages.get(&page) {
                let start = range.base.max(page * PAGE) - page * PAGE;
                let end = range.end().min((page + 1) * PAGE) - page * PAGE;
                if p[start as usize..end as usize].iter().any(|&b| b != 0) {
                    return false;
                }
            }
            page += 1;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn little_endian_and_sparse() {
        let mut m = Memory::new();
        assert_eq!(m.read(0x8000_0000, 8), 0);
        m.write(0x8000_0ffe, 4, 0xAABB_CCDD);
        assert_eq!(m.read_byte(0x8000_0ffe), 0xDD);
        assert_eq!(m.read(0x8000_0ffe, 4), 0xAABB_CCDD);
        assert_eq!(m.read(0x8000_1000, 2), 0xAABB);
        assert!(!m.is_zero(MemRange::new(0x8000_0000, 0x2000)));
        m.zero(MemRange::new(0x8000_0fff, 2));
        assert_eq!(m.read(0x8000_0ffe, 4), 0xAA00_00DD);
        m.zero(MemRange::new(0x8000_0000, 0x2000));
        assert!(m.is_zero(MemRange::new(0x8000_0000, 0x2000)));
    }
}
