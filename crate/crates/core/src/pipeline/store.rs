//! On-disk layout of trained components: one `.sfql` checkpoint per network
//! plus a JSON header per component.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use crate::actor::{ActorHeader, OneStepActor};
use crate::critics::{CriticBundle, CriticHeader};
use crate::error::{Error, Result};
use crate::flow::{FlowHeader, FlowTeacher};
use crate::nn::checkpoint;

pub const CRITICS_DIR: &str = "critics";
pub const FLOW_DIR: &str = "flow";
pub const ACTOR_DIR: &str = "actor";

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a CSV with the given header and rows.
pub(crate) fn write_csv<I, R>(path: &Path, header: &str, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: AsRef<str>,
{
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let go = || -> std::io::Result<()> {
        writeln!(w, "{header}")?;
        for r in rows {
            writeln!(w, "{}", r.as_ref())?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}

fn header_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

pub fn critics_present(root: &Path) -> bool {
    header_path(&root.join(CRITICS_DIR), "critics").exists()
}

pub fn flow_present(root: &Path) -> bool {
    header_path(&root.join(FLOW_DIR), "flow").exists()
}

pub fn actor_present(root: &Path) -> bool {
    header_path(&root.join(ACTOR_DIR), "actor").exists()
}

pub fn save_critics(root: &Path, bundle: &CriticBundle) -> Result<()> {
    let dir = root.join(CRITICS_DIR);
    create_dir(&dir)?;
    for (name, net) in bundle.named() {
        checkpoint::save(net, &dir.join(format!("{name}.sfql")))?;
    }
    // header last so a partial save never looks complete
    write_json(&header_path(&dir, "critics"), &bundle.header())
}

pub fn load_critics(root: &Path) -> Result<CriticBundle> {
    let dir = root.join(CRITICS_DIR);
    let header: CriticHeader = read_json(&header_path(&dir, "critics"))?;
    let mut names: Vec<String> = (1..=header.reward_heads).map(|h| format!("q_r{h}")).collect();
    names.extend(["v_r", "q_c1", "q_c2", "v_c"].map(String::from));
    let nets = names
        .iter()
        .map(|n| checkpoint::load(&dir.join(format!("{n}.sfql"))))
        .collect::<Result<Vec<_>>>()?;
    CriticBundle::from_parts(&header, nets)
}

pub fn save_flow(root: &Path, teacher: &FlowTeacher) -> Result<()> {
    let dir = root.join(FLOW_DIR);
    create_dir(&dir)?;
    checkpoint::save(&teacher.net, &dir.join("velocity.sfql"))?;
    write_json(&header_path(&dir, "flow"), &teacher.header())
}

pub fn load_flow(root: &Path) -> Result<FlowTeacher> {
    let dir = root.join(FLOW_DIR);
    let header: FlowHeader = read_json(&header_path(&dir, "flow"))?;
    FlowTeacher::from_parts(&header, checkpoint::load(&dir.join("velocity.sfql"))?)
}

pub fn save_actor(root: &Path, actor: &OneStepActor) -> Result<()> {
    let dir = root.join(ACTOR_DIR);
    create_dir(&dir)?;
    checkpoint::save(&actor.net, &dir.join("actor.sfql"))?;
    write_json(&header_path(&dir, "actor"), &actor.header())
}

pub fn load_actor(root: &Path) -> Result<OneStepActor> {
    let dir = root.join(ACTOR_DIR);
    let header: ActorHeader = read_json(&header_path(&dir, "actor"))?;
    OneStepActor::from_parts(&header, checkpoint::load(&dir.join("actor.sfql"))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critics::CriticConfig;

    #[test]
    fn components_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CriticConfig {
            hidden: vec![8, 8],
            ..Default::default()
        };
        let bundle = CriticBundle::new(&cfg).unwrap();
        assert!(!critics_present(dir.path()));
        save_critics(dir.path(), &bundle).unwrap();
        assert!(critics_present(dir.path()));
        assert_eq!(load_critics(dir.path()).unwrap(), bundle);

        let t = FlowTeacher::new(vec![8], 10, 1).unwrap();
        save_flow(dir.path(), &t).unwrap();
        assert_eq!(load_flow(dir.path()).unwrap(), t);

        let a = OneStepActor::new(vec![8], 0.5, 2.0, 1).unwrap();
        save_actor(dir.path(), &a).unwrap();
        assert_eq!(load_actor(dir.path()).unwrap(), a);
    }
}
