use crate::error::{Error, Result};

/// Codes of a `rows × cols` matrix split into one binary matrix per bit
/// position, each row packed little-endian into `u64` words with zero padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlaneMatrix {
    n_bits: u8,
    rows: usize,
    cols: usize,
    words_per_row: usize,
    /// `planes[p][r * words_per_row + w]`
    planes: Vec<Vec<u64>>,
}

impl BitPlaneMatrix {
    pub fn n_bits(&self) -> u8 {
        self.n_bits
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    /// Packed words of plane `p`, row `r`.
    pub fn row(&self, p: usize, r: usize) -> &[u64] {
        &self.planes[p][r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Rebuilds the code matrix as `Σ_p 2^p · plane_p`.
    pub fn unpack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.rows * self.cols];
        for (p, plane) in self.planes.iter().enumerate() {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let word = plane[r * self.words_per_row + c / 64];
                    out[r * self.cols + c] |= (((word >> (c % 64)) & 1) as u8) << p;
                }
            }
        }
        out
    }

    /// Number of ones in each row of the code matrix, weighted by bit value:
    /// `Σ_c codes[r][c]`.
    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.rows)
            .map(|r| {
                (0..self.n_bits as usize)
                    .map(|p| {
                        self.row(p, r)
                            .iter()
                            .map(|w| w.count_ones() as u64)
                            .sum::<u64>()
                            << p
                    })
                    .sum()
            })
            .collect()
    }

    /// Checks that padding bits past `cols` are zero in every plane.
    pub fn padding_is_zero(&self) -> bool {
        let tail = self.cols % 64;
        if tail == 0 {
            return true;
        }
        let mask = !0u64 << tail;
        self.planes.iter().all(|plane| {
            (0..self.rows)
                .all(|r| plane[r * self.words_per_row + self.words_per_row - 1] & mask == 0)
        })
    }
}

/// Splits row-major `codes[rows × cols]` into `n_bits` bit planes.
pub fn pack_bitplanes(
    codes: &[u8],
    rows: usize,
    cols: usize,
    n_bits: u8,
) -> Result<BitPlaneMatrix> {
    if n_bits == 0 || n_bits > 8 {
        return Err(Error::Usage(format!(
            "bit planes need 1..=8 bits, got {n_bits}"
        )));
    }
    if codes.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{} codes for a {rows}×{cols} matrix",
            codes.len()
        )));
    }
    let limit = ((1u16 << n_bits) - 1) as u8;
    if let Some(&bad) = codes.iter().find(|&&c| c > limit) {
        return Err(Error::Input(format!(
            "code {bad} does not fit in {n_bits} bits"
        )));
    }
    let words_per_row = cols.div_ceil(64);
    let mut planes = vec![vec![0u64; rows * words_per_row]; n_bits as usize];
    for r in 0..rows {
        for c in 0..cols {
            let code = codes[r * cols + c];
            let (w, b) = (r * words_per_row + c / 64, c % 64);
            for (p, plane) in planes.iter_mut().enumerate() {
                plane[w] |= (((code >> p) & 1) as u64) << b;
            }
        }
    }
    let m = BitPlaneMatrix {
        n_bits,
        rows,
        cols,
        words_per_row,
        planes,
    };
    debug_assert!(m.padding_is_zero());
    Ok(m)
}

/// Unsigned code dot products `Σ_i x[r][i]·w[o][i]` for every input row `r`
/// and weight row `o`, via `Σ_{p,q} 2^{p+q}·popcount(w_p AND x_q)`.
/// Returns `[x.rows × w.rows]`, row-major.
pub fn popcount_dot(w: &BitPlaneMatrix, x: &BitPlaneMatrix) -> Result<Vec<u64>> {
    if w.cols != x.cols {
        return Err(Error::Input(format!(
            "inner dimensions differ: weights have {} columns, inputs {}",
            w.cols, x.cols
        )));
    }
    let words = w.words_per_row;
    let mut out = vec![0u64; x.rows * w.rows];
    for r in 0..x.rows {
        for o in 0..w.rows {
            let mut acc = 0u64;
            for p in 0..w.n_bits as usize {
                let wr = w.row(p, o);
                for q in 0..x.n_bits as usize {
                    let xr = x.row(q, r);
                    let mut count = 0u64;
                    for i in 0..words {
                        count += (wr[i] & xr[i]).count_ones() as u64;
                    }
                    acc += count << (p + q);
                }
            }
            out[r * w.rows + o] = acc;
        }
    }
    Ok(out)
}
