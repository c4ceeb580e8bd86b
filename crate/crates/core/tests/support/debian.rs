//! Debian package changelogs (`/usr/share/doc/*/changelog.Debian.gz`) as a
//! time-stamped corpus: one document per changelog entry, dated by the
//! year on its sign-off line.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use dynamic_etm::corpus::RawDocument;
use flate2::read::GzDecoder;

pub const DOC_ROOT: &str = "/usr/share/doc";

/// Changelog files in path order.
pub fn changelog_files(root: &Path) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(root) else {
        return Vec::new();
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("changelog.Debian.gz"))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
}

fn signoff_year(line: &str) -> Option<i64> {
    let date = line.strip_prefix(" -- ")?.rsplit_once(">")?.1;
    // "  Mon, 01 Jan 2020 12:00:00 +0000"
    date.split_whitespace()
        .find(|w| w.len() == 4 && w.chars().all(|c| c.is_ascii_digit()))?
        .parse()
        .ok()
}

/// Entries of one changelog with at least `min_words` words of body text.
pub fn parse_changelog(text: &str, package: &str, min_words: usize) -> Vec<RawDocument> {
    let mut docs = Vec::new();
    let mut body = String::new();
    for line in text.lines() {
        if line.starts_with(" -- ") {
            if let Some(year) = signoff_year(line) {
                if body.split_whitespace().count() >= min_words {
                    docs.push(RawDocument {
                        text: std::mem::take(&mut body),
                        year,
                        source_id: format!("{package}:{}", docs.len()),
                    });
                }
            }
            body.clear();
        } else if line.starts_with(char::is_whitespace) {
            body.push_str(line.trim_start_matches([' ', '\t', '*', '-']));
            body.push('\n');
        }
    }
    docs
}

/// All entries dated within `years`, then every k-th one so that at most
/// `max_docs` remain.
pub fn load(root: &Path, years: std::ops::RangeInclusive<i64>, max_docs: usize) -> Vec<RawDocument> {
    let mut all = Vec::new();
    for path in changelog_files(root) {
        let package = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Ok(file) = fs::File::open(&path) else { continue };
        let mut bytes = Vec::new();
        if GzDecoder::new(file).read_to_end(&mut bytes).is_err() {
            continue;
        }
        let text = String::from_utf8_lossy(&bytes);
        all.extend(
            parse_changelog(&text, &package, 5)
                .into_iter()
                .filter(|d| years.contains(&d.year)),
        );
    }
    let stride = all.len().div_ceil(max_docs.max(1)).max(1);
    all.into_iter().step_by(stride).collect()
}
