use std::collections::BTreeMap;
use std::path::Path;
use std::time::UNIX_EPOCH;

use walkdir::WalkDir;

use super::{classify_artifact, ArtifactRef};

/// Sandbox bookkeeping directory inside each workdir; never reported as an
/// artifact.
pub const INTERNAL_DIR: &str = ".agentloom";

/// Regular files under a workdir: relative path → (mtime in ns, size).
pub type Snapshot = BTreeMap<String, (u128, u64)>;

pub fn snapshot(root: &Path) -> Snapshot {
    let mut files = Snapshot::new();
    let walker = WalkDir::new(root)
        .min_depth(1)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| !(e.depth() == 1 && e.file_name() == INTERNAL_DIR));
    for entry in walker.filter_map(Result::ok) {
        if !entry.file_type().is_file() {
            continue;
        }
        let Ok(meta) = entry.metadata() else { continue };
        let Ok(rel) = entry.path().strip_prefix(root) else { continue };
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        let mtime = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_nanos());
        files.insert(rel, (mtime, meta.len()));
    }
    files
}

/// Files that are new in `after` or whose mtime or size changed, sorted by
/// path.
pub fn diff_snapshots(before: &Snapshot, after: &Snapshot) -> Vec<ArtifactRef> {
    after
        .iter()
        .filter(|(path, stamp)| before.get(*path) != Some(stamp))
        .map(|(path, (_, bytes))| ArtifactRef {
            path: path.clone(),
            bytes: *bytes,
            media_kind: classify_artifact(path),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn detects_new_and_modified_files_only() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "same").unwrap();
        fs::write(dir.path().join("grow.csv"), "a").unwrap();
        fs::create_dir(dir.path().join(INTERNAL_DIR)).unwrap();
        let before = snapshot(dir.path());

        fs::write(dir.path().join("grow.csv"), "a,b").unwrap();
        fs::create_dir(dir.path().join("out")).unwrap();
        fs::write(dir.path().join("out/plot.png"), [0u8; 10]).unwrap();
        fs::write(dir.path().join(INTERNAL_DIR).join("x.sh"), "hidden").unwrap();
        let after = snapshot(dir.path());

        let arts = diff_snapshots(&before, &after);
        let paths: Vec<_> = arts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, ["grow.csv", "out/plot.png"]);
        assert_eq!(arts[1].bytes, 10);
    }
}
