//! Rate and quality table.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRow {
    pub width: usize,
    pub height: usize,
    pub q: f64,
    /// Framed image payload bits over this image's pixels.
    pub bpp: f64,
    pub psnr_codec: f64,
    pub psnr_pretrained: f64,
    pub psnr_finetuned: f64,
    /// The image rate target could not be met.
    pub unreachable: bool,
}

/// Per-image rows plus set totals. Image bits include the bundle header,
/// so `image_bits + update_bits == 8 * bundle bytes`.
#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub rows: Vec<ImageRow>,
    pub pixels: usize,
    pub image_bits: usize,
    pub update_bits: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl RateReport {
    pub const CSV_HEADER: &'static str = "row,width,height,q,image_bpp,update_bpp,total_bpp,\
psnr_codec,psnr_pretrained,psnr_finetuned,gain_pretrained,gain_finetuned,unreachable";

    pub fn total_bits(&self) -> usize {
        self.image_bits + self.update_bits
    }

    pub fn image_bpp(&self) -> f64 {
        self.image_bits as f64 / self.pixels as f64
    }

    pub fn update_bpp(&self) -> f64 {
        self.update_bits as f64 / self.pixels as f64
    }

    pub fn total_bpp(&self) -> f64 {
        self.total_bits() as f64 / self.pixels as f64
    }

    pub fn mean_psnr_codec(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_codec))
    }

    pub fn mean_psnr_pretrained(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_pretrained))
    }

    pub fn mean_psnr_finetuned(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr_finetuned))
    }

    /// Per-image rows, then an `all` row with set rates and mean PSNRs.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{},,,{},{},{},{},{},{}",
                r.width,
                r.height,
                r.q,
                r.bpp,
                r.psnr_codec,
                r.psnr_pretrained,
                r.psnr_finetuned,
                r.psnr_pretrained - r.psnr_codec,
                r.psnr_finetuned - r.psnr_pretrained,
                r.unreachable as u8
            );
        }
        let (c, p, f) = (self.mean_psnr_codec(), self.mean_psnr_pretrained(), self.mean_psnr_finetuned());
        let _ = writeln!(
            s,
            "all,,,,{},{},{},{c},{p},{f},{},{},{}",
            self.image_bpp(),
            self.update_bpp(),
            self.total_bpp(),
            p - c,
            f - p,
            self.rows.iter().filter(|r| r.unreachable).count()
        );
        s
    }
}

/// Parsed form of one CSV line; empty cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub row: String,
    pub values: Vec<Option<f64>>,
}

/// Reads a table written by [`RateReport::to_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RateReport::CSV_HEADER) {
        return Err(Error::format(0, "unexpected report header"));
    }
    let columns = RateReport::CSV_HEADER.split(',').count();
    let mut offset = RateReport::CSV_HEADER.len() + 1;
    let mut rows = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns {
            return Err(Error::format(offset, format!("expected {columns} cells, got {}", cells.len())));
        }
        let values = cells[1..]
            .iter()
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::format(offset, format!("bad number {c:?}")))
                }
            })
            .collect::<Result<_>>()?;
        rows.push(CsvRow { row: cells[0].to_string(), values });
        offset += line.len() + 1;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RateReport {
        RateReport {
            rows: vec![
                ImageRow {
                    width: 64,
                    height: 64,
                    q: 31.5,
                    bpp: 0.48,
                    psnr_codec: 28.0,
                    psnr_pretrained: 28.5,
                    psnr_finetuned: 28.75,
                    unreachable: false,
                },
                ImageRow {
                    width: 64,
                    height: 32,
                    q: 512.0,
                    bpp: 0.9,
                    psnr_codec: 20.0,
                    psnr_pretrained: f64::INFINITY,
                    psnr_finetuned: 21.0,
                    unreachable: true,
                },
            ],
            pixels: 6144,
            image_bits: 3000,
            update_bits: 400,
        }
    }

    #[test]
    fn totals_add_up() {
        let r = report();
        assert_eq!(r.total_bpp(), 3400.0 / 6144.0);
        assert!((r.image_bpp() + r.update_bpp() - r.total_bpp()).abs() < 1e-15);
    }

    #[test]
    fn csv_parses_back() {
        let r = report();
        let rows = parse_report_csv(&r.to_csv()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].values[2], Some(31.5));
        assert_eq!(rows[0].values[4], None);
        assert_eq!(rows[0].values[10], Some(0.25));
        assert_eq!(rows[1].values[7], Some(f64::INFINITY));
        assert_eq!(rows[1].values[11], Some(1.0));
        let all = &rows[2];
        assert_eq!(all.row, "all");
        assert_eq!(all.values[5], Some(r.total_bpp()));
        assert_eq!(all.values[6], Some(r.mean_psnr_codec()));
        assert_eq!(all.values[8], Some(r.mean_psnr_finetuned()));
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(parse_report_csv("a,b\n").is_err());
        let bad = format!("{}\n0,1,2\n", RateReport::CSV_HEADER);
        assert!(matches!(parse_report_csv(&bad), Err(Error::Format { .. })));
    }
}
