//! Baseline sequential JPEG encoder with selectable chroma subsampling, and
//! the encode/decode round trip used by the compression defense.
//!
//! Decoding goes through the `image` crate; its encoder only writes 4:4:4,
//! which is why encoding lives here.

use super::{ImageTensor, RawImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChromaSubsampling {
    /// Chroma at half resolution in both directions.
    Yuv420,
    /// Full-resolution chroma.
    Yuv444,
}

impl ChromaSubsampling {
    /// Common encoder default: 4:2:0 below quality 90, 4:4:4 from 90 up.
    pub fn for_quality(quality: u8) -> Self {
        if quality < 90 {
            Self::Yuv420
        } else {
            Self::Yuv444
        }
    }
}

#[rustfmt::skip]
const LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16,  24,  40,  51,  61,
    12, 12, 14, 19,  26,  58,  60,  55,
    14, 13, 16, 24,  40,  57,  69,  56,
    14, 17, 22, 29,  51,  87,  80,  62,
    18, 22, 37, 56,  68, 109, 103,  77,
    24, 35, 55, 64,  81, 104, 113,  92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103,  99,
];

#[rustfmt::skip]
const CHROMA_QTABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Zigzag position → natural (row-major) index.
#[rustfmt::skip]
const ZIGZAG: [usize; 64] = [
     0,  1,  8, 16,  9,  2,  3, 10,
    17, 24, 32, 25, 18, 11,  4,  5,
    12, 19, 26, 33, 40, 48, 41, 34,
    27, 20, 13,  6,  7, 14, 21, 28,
    35, 42, 49, 56, 57, 50, 43, 36,
    29, 22, 15, 23, 30, 37, 44, 51,
    58, 59, 52, 45, 38, 31, 39, 46,
    53, 60, 61, 54, 47, 55, 62, 63,
];

const LUMA_DC_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const CHROMA_DC_BITS: [u8; 16] = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
const DC_VALUES: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

const LUMA_AC_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
#[rustfmt::skip]
const LUMA_AC_VALUES: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
    0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5,
    0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
];

const CHROMA_AC_BITS: [u8; 16] = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
#[rustfmt::skip]
const CHROMA_AC_VALUES: [u8; 162] = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33, 0x52, 0xF0,
    0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18, 0x19, 0x1A, 0x26,
    0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5,
    0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3,
    0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA,
    0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
];

/// Canonical Huffman code table: `(length, code)` per symbol.
struct HuffTable {
    codes: [(u8, u16); 256],
}

impl HuffTable {
    fn new(bits: &[u8; 16], values: &[u8]) -> Self {
        let mut codes = [(0u8, 0u16); 256];
        let mut code: u16 = 0;
        let mut k = 0;
        for (len, &count) in bits.iter().enumerate() {
            for _ in 0..count {
                codes[values[k] as usize] = (len as u8 + 1, code);
                code += 1;
                k += 1;
            }
            code <<= 1;
        }
        Self { codes }
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn write(&mut self, bits: u16, len: u8) {
        if len == 0 {
            return;
        }
        self.acc = (self.acc << len) | (bits as u32 & ((1u32 << len) - 1));
        self.nbits += len as u32;
        while self.nbits >= 8 {
            let byte = (self.acc >> (self.nbits - 8)) as u8;
            self.out.push(byte);
            if byte == 0xFF {
                self.out.push(0x00);
            }
            self.nbits -= 8;
        }
        self.acc &= (1u32 << self.nbits) - 1;
    }

    fn flush(&mut self) {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.write((1u16 << pad) - 1, pad as u8);
        }
    }
}

fn scaled_table(base: &[u16; 64], quality: u8) -> [u8; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    std::array::from_fn(|i| ((base[i] as u32 * scale + 50) / 100).clamp(1, 255) as u8)
}

fn magnitude(v: i32) -> (u8, u16) {
    let size = 32 - v.unsigned_abs().leading_zeros();
    let bits = if v < 0 { v - 1 } else { v };
    (size as u8, (bits as u32 & ((1u32 << size) - 1).max(0)) as u16)
}

struct Plane {
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    fn block(&self, bx: usize, by: usize) -> [f64; 64] {
        std::array::from_fn(|i| self.data[(by * 8 + i / 8) * self.width + bx * 8 + i % 8] - 128.0)
    }
}

fn fdct(block: &[f64; 64], cos: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| block[y * 8 + x] * cos[u][x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            let s: f64 = (0..8).map(|y| tmp[y * 8 + u] * cos[v][y]).sum();
            let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            let cv = if v == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            out[v * 8 + u] = 0.25 * cu * cv * s;
        }
    }
    out
}

struct Component<'a> {
    plane: Plane,
    qtable: [u8; 64],
    dc: &'a HuffTable,
    ac: &'a HuffTable,
    pred: i32,
}

impl Component<'_> {
    fn encode_block(&mut self, w: &mut BitWriter, bx: usize, by: usize, cos: &[[f64; 8]; 8]) {
        let coef = fdct(&self.plane.block(bx, by), cos);
        let q: [i32; 64] =
            std::array::from_fn(|k| (coef[ZIGZAG[k]] / self.qtable[ZIGZAG[k]] as f64).round() as i32);
        let diff = q[0] - self.pred;
        self.pred = q[0];
        let (size, bits) = magnitude(diff);
        let (len, code) = self.dc.codes[size as usize];
        w.write(code, len);
        w.write(bits, size);
        let mut run = 0;
        for &c in &q[1..] {
            if c == 0 {
                run += 1;
                continue;
            }
            while run > 15 {
                let (len, code) = self.ac.codes[0xF0];
                w.write(code, len);
                run -= 16;
            }
            let (size, bits) = magnitude(c);
            let (len, code) = self.ac.codes[(run << 4 | size as usize) & 0xFF];
            w.write(code, len);
            w.write(bits, size);
            run = 0;
        }
        if run > 0 {
            let (len, code) = self.ac.codes[0x00];
            w.write(code, len);
        }
    }
}

fn segment(out: &mut Vec<u8>, marker: u8, body: &[u8]) {
    out.extend_from_slice(&[0xFF, marker]);
    out.extend_from_slice(&((body.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(body);
}

/// Encode an RGB image as a baseline JPEG at `quality` (1–100).
pub fn encode_jpeg(img: &RawImage, quality: u8, subsampling: ChromaSubsampling) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Jpeg {
            quality,
            message: "quality must be in [1, 100]".into(),
        });
    }
    if img.height > u16::MAX as usize || img.width > u16::MAX as usize {
        return Err(Error::Jpeg {
            quality,
            message: format!("{}x{} exceeds the baseline size limit", img.height, img.width),
        });
    }
    let mcu = match subsampling {
        ChromaSubsampling::Yuv420 => 16,
        ChromaSubsampling::Yuv444 => 8,
    };
    let pw = img.width.div_ceil(mcu) * mcu;
    let ph = img.height.div_ceil(mcu) * mcu;
    let mut planes = [vec![0.0; pw * ph], vec![0.0; pw * ph], vec![0.0; pw * ph]];
    for y in 0..ph {
        let sy = y.min(img.height - 1);
        for x in 0..pw {
            let sx = x.min(img.width - 1);
            let p = &img.pixels[(sy * img.width + sx) * 3..][..3];
            let (r, g, b) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let i = y * pw + x;
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
            planes[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
        }
    }
    let [y_plane, cb_plane, cr_plane] = planes;
    let chroma = |data: Vec<f64>| -> Plane {
        match subsampling {
            ChromaSubsampling::Yuv444 => Plane { width: pw, data },
            ChromaSubsampling::Yuv420 => {
                let (cw, ch) = (pw / 2, ph / 2);
                let mut out = vec![0.0; cw * ch];
                for y in 0..ch {
                    for x in 0..cw {
                        let i = 2 * y * pw + 2 * x;
                        out[y * cw + x] = 0.25 * (data[i] + data[i + 1] + data[i + pw] + data[i + pw + 1]);
                    }
                }
                Plane { width: cw, data: out }
            }
        }
    };

    let luma_q = scaled_table(&LUMA_QTABLE, quality);
    let chroma_q = scaled_table(&CHROMA_QTABLE, quality);
    let tables = [
        HuffTable::new(&LUMA_DC_BITS, &DC_VALUES),
        HuffTable::new(&LUMA_AC_BITS, &LUMA_AC_VALUES),
        HuffTable::new(&CHROMA_DC_BITS, &DC_VALUES),
        HuffTable::new(&CHROMA_AC_BITS, &CHROMA_AC_VALUES),
    ];
    let mut comps = [
        Component { plane: Plane { width: pw, data: y_plane }, qtable: luma_q, dc: &tables[0], ac: &tables[1], pred: 0 },
        Component { plane: chroma(cb_plane), qtable: chroma_q, dc: &tables[2], ac: &tables[3], pred: 0 },
        Component { plane: chroma(cr_plane), qtable: chroma_q, dc: &tables[2], ac: &tables[3], pred: 0 },
    ];

    let mut out = Vec::with_capacity(1024 + pw * ph / 4);
    out.extend_from_slice(&[0xFF, 0xD8]);
    segment(&mut out, 0xE0, &[b'J', b'F', b'I', b'F', 0, 1, 1, 0, 0, 1, 0, 1, 0, 0]);
    let mut dqt = Vec::with_capacity(130);
    for (id, table) in [&luma_q, &chroma_q].into_iter().enumerate() {
        dqt.push(id as u8);
        dqt.extend(ZIGZAG.iter().map(|&n| table[n]));
    }
    segment(&mut out, 0xDB, &dqt);
    let luma_sampling = if mcu == 16 { 0x22 } else { 0x11 };
    let mut sof = vec![8];
    sof.extend_from_slice(&(img.height as u16).to_be_bytes());
    sof.extend_from_slice(&(img.width as u16).to_be_bytes());
    sof.extend_from_slice(&[3, 1, luma_sampling, 0, 2, 0x11, 1, 3, 0x11, 1]);
    segment(&mut out, 0xC0, &sof);
    for (class_id, bits, values) in [
        (0x00, &LUMA_DC_BITS, &DC_VALUES[..]),
        (0x10, &LUMA_AC_BITS, &LUMA_AC_VALUES[..]),
        (0x01, &CHROMA_DC_BITS, &DC_VALUES[..]),
        (0x11, &CHROMA_AC_BITS, &CHROMA_AC_VALUES[..]),
    ] {
        let mut body = vec![class_id];
        body.extend_from_slice(bits);
        body.extend_from_slice(values);
        segment(&mut out, 0xC4, &body);
    }
    segment(&mut out, 0xDA, &[3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0]);

    let cos: [[f64; 8]; 8] = std::array::from_fn(|u| {
        std::array::from_fn(|x| ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos())
    });
    let mut w = BitWriter { out, acc: 0, nbits: 0 };
    let luma_blocks = mcu / 8;
    for my in 0..ph / mcu {
        for mx in 0..pw / mcu {
            for by in 0..luma_blocks {
                for bx in 0..luma_blocks {
                    comps[0].encode_block(&mut w, mx * luma_blocks + bx, my * luma_blocks + by, &cos);
                }
            }
            comps[1].encode_block(&mut w, mx, my, &cos);
            comps[2].encode_block(&mut w, mx, my, &cos);
        }
    }
    w.flush();
    let mut out = w.out;
    out.extend_from_slice(&[0xFF, 0xD9]);
    Ok(out)
}

/// Denormalize to 8 bits, JPEG-encode at `quality`, decode and renormalize.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    let raw = img.to_raw();
    let bytes = encode_jpeg(&raw, quality, ChromaSubsampling::for_quality(quality))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Jpeg {
            quality,
            message: e.to_string(),
        })?
        .to_rgb8();
    if (decoded.height() as usize, decoded.width() as usize) != img.shape() {
        return Err(Error::Jpeg {
            quality,
            message: "decoded size differs from input".into(),
        });
    }
    let back = RawImage {
        height: img.height(),
        width: img.width(),
        pixels: decoded.into_raw(),
        source_path: None,
    };
    Ok(ImageTensor::from_raw(&back))
}
