use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

/// CSV file whose first line is `# config-hash: <sha256>`; further comment
/// lines may follow before the header row.
pub struct CsvOut {
    pub path: PathBuf,
    w: BufWriter<File>,
}

impl CsvOut {
    pub fn create(dir: &Path, name: &str, hash: &str, notes: &[String], header: &str) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "# config-hash: {hash}")?;
        for n in notes {
            writeln!(w, "# {n}")?;
        }
        writeln!(w, "{header}")?;
        Ok(Self { path, w })
    }

    pub fn row(&mut self, fields: &[String]) -> io::Result<()> {
        writeln!(self.w, "{}", fields.join(","))
    }

    pub fn finish(mut self) -> io::Result<PathBuf> {
        self.w.flush()?;
        Ok(self.path)
    }
}

pub fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

/// Shortest round-trip formatting, so identical values give identical bytes;
/// exponent form outside `[1e-4, 1e15)`.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::num;

    #[test]
    fn numbers_round_trip() {
        for x in [0.0, 1.5, -0.059050279037615956, 9.092939219244343e-13, 1e300, -2.5e-7, 123456.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(9.092939219244343e-13), "9.092939219244343e-13");
        assert_eq!(num(1024.0), "1024");
    }
}
