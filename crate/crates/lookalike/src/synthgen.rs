//! Synthetic multi-view dataset generator with planted preference groups:
//! each group prefers its own block of items, shops, genres, hotels, and
//! months, and demographic literals are drawn from group-conditional
//! distributions, so "similar users" has a ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_groups: usize,
    pub n_items: usize,
    pub n_shops: usize,
    pub n_genres: usize,
    pub n_hotels: usize,
    pub interactions_per_user: usize,
    pub travel_bookings_per_user: usize,
    /// Probability an interaction lands in the user's own group block.
    pub p_in: f64,
    pub family_edge_prob: f64,
    /// Per-group `[ichiba, travel]` activity probabilities; empty means every
    /// group is fully active in both services.
    pub cross_service_activity: Vec<Vec<f64>>,
    // group-conditional attribute schema
    pub age_base: f64,
    pub age_step: f64,
    pub age_jitter: f64,
    pub n_areas: usize,
    pub areas_per_group: usize,
    pub area_pref_prob: f64,
    pub reg_year_base: i32,
    pub reg_year_span: i32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 2000,
            n_groups: 5,
            n_items: 1000,
            n_shops: 15,
            n_genres: 10,
            n_hotels: 10,
            interactions_per_user: 18,
            travel_bookings_per_user: 10,
            p_in: 0.8,
            family_edge_prob: 0.4,
            cross_service_activity: Vec::new(),
            age_base: 22.0,
            age_step: 7.0,
            age_jitter: 5.0,
            n_areas: 12,
            areas_per_group: 3,
            area_pref_prob: 0.7,
            reg_year_base: 2004,
            reg_year_span: 3,
            seed: 42,
        }
    }
}

const N_MONTHS: usize = 12;
const N_RESERVATION_TYPES: usize = 6;
const N_PARTNERS: usize = 6;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups < 2 {
            return Err(Error::Config("n_groups must be >= 2".into()));
        }
        if self.n_users < self.n_groups {
            return Err(Error::Config("n_users must cover every group".into()));
        }
        for (name, p) in [
            ("p_in", self.p_in),
            ("family_edge_prob", self.family_edge_prob),
            ("area_pref_prob", self.area_pref_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if !self.cross_service_activity.is_empty() {
            if self.cross_service_activity.len() != self.n_groups {
                return Err(Error::Config(
                    "cross_service_activity needs one [ichiba, travel] row per group".into(),
                ));
            }
            for row in &self.cross_service_activity {
                if row.len() != 2 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::Config(
                        "cross_service_activity rows are [ichiba, travel] probabilities".into(),
                    ));
                }
            }
        }
        for (name, v) in [
            ("n_items", self.n_items),
            ("n_shops", self.n_shops),
            ("n_genres", self.n_genres),
            ("n_hotels", self.n_hotels),
        ] {
            if v < self.n_groups {
                return Err(Error::Config(format!("{name} must be >= n_groups")));
            }
        }
        Ok(())
    }

    fn activity(&self, group: usize) -> (f64, f64) {
        if self.cross_service_activity.is_empty() {
            (1.0, 1.0)
        } else {
            let row = &self.cross_service_activity[group];
            (row[0], row[1])
        }
    }

    /// Contiguous block of a group within `count` entities.
    fn block(&self, count: usize, group: usize) -> std::ops::Range<usize> {
        let lo = group * count / self.n_groups;
        let hi = (group + 1) * count / self.n_groups;
        lo..hi
    }

    /// Which group block an item index belongs to.
    pub fn item_group(&self, item: usize) -> usize {
        (0..self.n_groups)
            .find(|&g| self.block(self.n_items, g).contains(&item))
            .expect("item index in range")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFiles {
    pub ichiba_triples: PathBuf,
    pub travel_triples: PathBuf,
    pub attributes: PathBuf,
    pub family_triples: PathBuf,
    pub entity_types: PathBuf,
    pub groups: PathBuf,
}

fn pick_in_block(
    cfg: &GenConfig,
    count: usize,
    group: usize,
    p_in: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    if rng.gen_bool(p_in) {
        let b = cfg.block(count, group);
        rng.gen_range(b.start..b.end)
    } else {
        rng.gen_range(0..count)
    }
}

/// Generate all dataset files into `out_dir`.
pub fn generate(cfg: &GenConfig, out_dir: &Path) -> Result<GeneratedFiles> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let user_label = |i: usize| format!("u{i:05}");
    let fm_label = |i: usize| format!("fm{i:05}");
    let item_label = |i: usize| format!("item{i:04}");
    let shop_label = |i: usize| format!("shop{i:03}");
    let genre_label = |i: usize| format!("genre{i:02}");
    let root_label = |i: usize| format!("groot{i}");
    let hotel_label = |i: usize| format!("hotel{i:03}");
    let month_label = |i: usize| format!("month{i:02}");
    let rt_label = |i: usize| format!("rt{i}");
    let partner_label = |i: usize| format!("partner{i}");

    let mut ichiba = String::new();
    let mut travel = String::new();
    let mut attributes = String::new();
    let mut family = String::new();
    let mut groups_out = String::new();
    let mut types: BTreeSet<(String, &'static str)> = BTreeSet::new();

    // Static structure: items -> shops/genres, genre hierarchy, hotel partners.
    let n_roots = (cfg.n_genres / 4).max(1);
    for i in 0..cfg.n_items {
        let g = cfg.item_group(i);
        let shop_block = cfg.block(cfg.n_shops, g);
        let shop = shop_block.start + i % shop_block.len().max(1);
        let genre_block = cfg.block(cfg.n_genres, g);
        let genre = genre_block.start + i % genre_block.len().max(1);
        ichiba.push_str(&format!("{}\tsold_by\t{}\n", item_label(i), shop_label(shop)));
        ichiba.push_str(&format!(
            "{}\titem_under_leaf_genre\t{}\n",
            item_label(i),
            genre_label(genre)
        ));
        types.insert((item_label(i), "item"));
        types.insert((shop_label(shop), "shop"));
        types.insert((genre_label(genre), "genre"));
    }
    for j in 0..cfg.n_genres {
        let root = j % n_roots;
        ichiba.push_str(&format!(
            "{}\tgenre_parent_l1\t{}\n",
            genre_label(j),
            root_label(root)
        ));
        types.insert((genre_label(j), "genre"));
        types.insert((root_label(root), "genre"));
    }
    for h in 0..cfg.n_hotels {
        travel.push_str(&format!(
            "{}\treserved_under_partner_id\t{}\n",
            hotel_label(h),
            partner_label(h % N_PARTNERS)
        ));
        types.insert((hotel_label(h), "hotel"));
        types.insert((partner_label(h % N_PARTNERS), "partner"));
    }

    let mut ichiba_user_edges = 0usize;
    let mut travel_user_edges = 0usize;
    let mut family_edges = 0usize;

    let emit_interactions =
        |who: &str, group: usize, n: usize, rng: &mut ChaCha8Rng, out: &mut String| {
            for _ in 0..n {
                let item = pick_in_block(cfg, cfg.n_items, group, cfg.p_in, rng);
                let rel = if rng.gen_bool(0.8) { "bought" } else { "clicked" };
                out.push_str(&format!("{}\t{}\t{}\n", who, rel, item_label(item)));
            }
        };

    for i in 0..cfg.n_users {
        let g = i % cfg.n_groups;
        let user = user_label(i);
        types.insert((user.clone(), "user"));
        groups_out.push_str(&format!("{user}\t{g}\n"));

        // demographic literals, group-conditional
        let age = cfg.age_base + cfg.age_step * g as f64
            + rng.gen_range(-cfg.age_jitter..=cfg.age_jitter);
        attributes.push_str(&format!("{user}\tage\t{age:.1}\n"));
        let area = if rng.gen_bool(cfg.area_pref_prob) {
            (g * cfg.areas_per_group + rng.gen_range(0..cfg.areas_per_group)) % cfg.n_areas
        } else {
            rng.gen_range(0..cfg.n_areas)
        };
        attributes.push_str(&format!("{user}\tarea_code\t{area}\n"));
        let year = cfg.reg_year_base + g as i32 + rng.gen_range(0..cfg.reg_year_span);
        let month = rng.gen_range(1..=12);
        let day = rng.gen_range(1..=28);
        attributes.push_str(&format!("{user}\treg_date\t{year}-{month:02}-{day:02}\n"));

        let (p_ichiba, p_travel) = cfg.activity(g);
        if p_ichiba > 0.0 && rng.gen_bool(p_ichiba) {
            let before = ichiba.len();
            emit_interactions(&user, g, cfg.interactions_per_user, &mut rng, &mut ichiba);
            if ichiba.len() > before {
                ichiba_user_edges += cfg.interactions_per_user;
            }
        }
        if p_travel > 0.0 && rng.gen_bool(p_travel) {
            for _ in 0..cfg.travel_bookings_per_user {
                let hotel = pick_in_block(cfg, cfg.n_hotels, g, cfg.p_in, &mut rng);
                travel.push_str(&format!("{user}\tbooked\t{}\n", hotel_label(hotel)));
            }
            let preferred_months = [(g * 2) % N_MONTHS, (g * 2 + 1) % N_MONTHS];
            for _ in 0..2 {
                let m = if rng.gen_bool(cfg.p_in) {
                    preferred_months[rng.gen_range(0..2)]
                } else {
                    rng.gen_range(0..N_MONTHS)
                };
                travel.push_str(&format!("{user}\tvisiting_month\t{}\n", month_label(m)));
                types.insert((month_label(m), "month"));
            }
            let rt = if rng.gen_bool(0.7) {
                g % N_RESERVATION_TYPES
            } else {
                rng.gen_range(0..N_RESERVATION_TYPES)
            };
            travel.push_str(&format!("{user}\tuser_reservation_type\t{}\n", rt_label(rt)));
            types.insert((rt_label(rt), "reservation_type"));
            travel_user_edges += cfg.travel_bookings_per_user;
        }

        if cfg.family_edge_prob > 0.0 && rng.gen_bool(cfg.family_edge_prob) {
            let fm = fm_label(i);
            let rel = ["spouse", "parent", "child"][rng.gen_range(0..3)];
            family.push_str(&format!("{user}\t{rel}\t{fm}\n"));
            types.insert((fm.clone(), "user"));
            // family members' buying behavior carries the group signal
            emit_interactions(&fm, g, cfg.interactions_per_user, &mut rng, &mut ichiba);
            family_edges += 1;
        }
    }

    if ichiba_user_edges == 0 {
        return Err(Error::Invalid(
            "config yields zero user interactions for the ichiba view".into(),
        ));
    }
    if travel_user_edges == 0 {
        return Err(Error::Invalid(
            "config yields zero user interactions for the travel view".into(),
        ));
    }
    if cfg.family_edge_prob > 0.0 && family_edges == 0 {
        return Err(Error::Invalid("config yields zero family edges".into()));
    }

    let mut types_out = String::new();
    for (label, ty) in &types {
        types_out.push_str(&format!("{label}\t{ty}\n"));
    }

    let files = GeneratedFiles {
        ichiba_triples: out_dir.join("ichiba_triples.tsv"),
        travel_triples: out_dir.join("travel_triples.tsv"),
        attributes: out_dir.join("attributes.tsv"),
        family_triples: out_dir.join("family_triples.tsv"),
        entity_types: out_dir.join("entity_types.tsv"),
        groups: out_dir.join("groups.tsv"),
    };
    for (path, content) in [
        (&files.ichiba_triples, &ichiba),
        (&files.travel_triples, &travel),
        (&files.attributes, &attributes),
        (&files.family_triples, &family),
        (&files.entity_types, &types_out),
        (&files.groups, &groups_out),
    ] {
        std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(files)
}

// ---------------------------------------------------------------------------
// Ground truth and campaigns
// ---------------------------------------------------------------------------

/// Parse `user<TAB>group` rows.
pub fn parse_groups(content: &str, file: &str) -> Result<BTreeMap<String, usize>> {
    let mut groups = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (user, group) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(file, lineno, "expected user<TAB>group"))?;
        if user.is_empty() {
            return Err(Error::parse(file, lineno, "empty user field"));
        }
        let g: usize = group
            .parse()
            .map_err(|_| Error::parse(file, lineno, format!("bad group `{group}`")))?;
        if groups.insert(user.to_string(), g).is_some() {
            return Err(Error::parse(file, lineno, format!("duplicate user `{user}`")));
        }
    }
    if groups.is_empty() {
        return Err(Error::Invalid(format!("{file}: empty groups file")));
    }
    Ok(groups)
}

pub fn load_groups(path: &Path) -> Result<BTreeMap<String, usize>> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_groups(&content, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub target_group: usize,
    pub seeds: Vec<String>,
    pub holdout_positives: Vec<String>,
}

/// Split one group into campaign seeds (a random `seed_fraction`) and
/// held-out positives (the remainder).
pub fn make_campaign(
    groups: &BTreeMap<String, usize>,
    target_group: usize,
    seed_fraction: f64,
    seed: u64,
) -> Result<Campaign> {
    if !(0.0 < seed_fraction && seed_fraction < 1.0) {
        return Err(Error::Config("seed_fraction must be in (0, 1)".into()));
    }
    let mut members: Vec<String> = groups
        .iter()
        .filter(|(_, &g)| g == target_group)
        .map(|(u, _)| u.clone())
        .collect();
    if members.is_empty() {
        return Err(Error::Invalid(format!("no users in group {target_group}")));
    }
    if (members.len() as f64) < 2.0 / seed_fraction {
        return Err(Error::Invalid(format!(
            "group {target_group} has {} members, too small for seed fraction {seed_fraction}",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    members.shuffle(&mut rng);
    let n_seeds = ((members.len() as f64) * seed_fraction).round() as usize;
    let n_seeds = n_seeds.clamp(1, members.len() - 1);
    let (seeds, holdout) = members.split_at(n_seeds);
    let mut seeds = seeds.to_vec();
    let mut holdout = holdout.to_vec();
    seeds.sort();
    holdout.sort();
    Ok(Campaign {
        target_group,
        seeds,
        holdout_positives: holdout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::GraphSource;
    use crate::ViewKind;

    fn small_cfg() -> GenConfig {
        GenConfig {
            n_users: 100,
            n_groups: 4,
            n_items: 80,
            n_shops: 8,
            n_genres: 8,
            n_hotels: 8,
            interactions_per_user: 10,
            travel_bookings_per_user: 6,
            seed: 5,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate(&small_cfg(), &dir.path().join("a")).unwrap();
        let b = generate(&small_cfg(), &dir.path().join("b")).unwrap();
        for (x, y) in [
            (&a.ichiba_triples, &b.ichiba_triples),
            (&a.travel_triples, &b.travel_triples),
            (&a.attributes, &b.attributes),
            (&a.family_triples, &b.family_triples),
            (&a.entity_types, &b.entity_types),
            (&a.groups, &b.groups),
        ] {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }

    #[test]
    fn full_activity_puts_every_user_in_both_services() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate(&small_cfg(), dir.path()).unwrap();
        let ichiba = std::fs::read_to_string(&files.ichiba_triples).unwrap();
        let travel = std::fs::read_to_string(&files.travel_triples).unwrap();
        for i in 0..100 {
            let user = format!("u{i:05}\t");
            assert!(ichiba.contains(&user), "user {i} missing from ichiba");
            assert!(travel.contains(&user), "user {i} missing from travel");
        }
    }

    #[test]
    fn travel_only_group_never_appears_in_ichiba() {
        let mut cfg = small_cfg();
        cfg.cross_service_activity = vec![
            vec![1.0, 1.0],
            vec![0.0, 1.0], // group 1 is travel-only
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        ];
        let dir = tempfile::tempdir().unwrap();
        let files = generate(&cfg, dir.path()).unwrap();
        let ichiba = std::fs::read_to_string(&files.ichiba_triples).unwrap();
        let groups = load_groups(&files.groups).unwrap();
        for (user, g) in groups {
            if g == 1 {
                assert!(!ichiba.contains(&format!("{user}\t")), "{user} leaked into ichiba");
            }
        }
    }

    #[test]
    fn inactive_everywhere_is_an_error() {
        let mut cfg = small_cfg();
        cfg.cross_service_activity = vec![vec![0.0, 1.0]; 4];
        let dir = tempfile::tempdir().unwrap();
        assert!(generate(&cfg, dir.path()).is_err());
        assert!(cfg.validate().is_ok());
        cfg.cross_service_activity = vec![vec![0.0, 1.0]; 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn group_preference_purity_holds_in_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate(&small_cfg(), dir.path()).unwrap();
        let cfg = small_cfg();
        let groups = load_groups(&files.groups).unwrap();
        let ichiba = std::fs::read_to_string(&files.ichiba_triples).unwrap();
        let mut in_block = 0usize;
        let mut total = 0usize;
        for line in ichiba.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            let (head, rel, tail) = (fields[0], fields[1], fields[2]);
            if rel != "bought" && rel != "clicked" {
                continue;
            }
            let Some(&g) = groups.get(head) else { continue };
            let item: usize = tail.trim_start_matches("item").parse().unwrap();
            if cfg.item_group(item) == g {
                in_block += 1;
            }
            total += 1;
        }
        let purity = in_block as f64 / total as f64;
        assert!(purity >= 0.8, "purity {purity}");
    }

    #[test]
    fn generated_files_pass_the_loaders() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate(&small_cfg(), dir.path()).unwrap();
        let ichiba = GraphSource {
            view: Some(ViewKind::Ichiba),
            triple_files: vec![files.ichiba_triples.clone()],
            entity_types_file: Some(files.entity_types.clone()),
            ..Default::default()
        }
        .load()
        .unwrap();
        assert!(ichiba.triples().len() > 500);
        let travel = GraphSource {
            view: Some(ViewKind::Travel),
            triple_files: vec![files.travel_triples.clone()],
            entity_types_file: Some(files.entity_types.clone()),
            ..Default::default()
        }
        .load()
        .unwrap();
        assert!(!travel.triples().is_empty());
        let demo = GraphSource {
            view: Some(ViewKind::Demography),
            attribute_files: vec![files.attributes.clone()],
            add_missing_subjects: true,
            ..Default::default()
        }
        .load()
        .unwrap();
        assert_eq!(demo.attributes().len(), 300);

        // ground-truth groups partition the universe
        let groups = load_groups(&files.groups).unwrap();
        assert_eq!(groups.len(), 100);
        for g in groups.values() {
            assert!(*g < 4);
        }
    }

    #[test]
    fn campaign_split_sizes_and_disjointness() {
        let groups: BTreeMap<String, usize> =
            (0..100).map(|i| (format!("u{i:03}"), 0)).collect();
        let c = make_campaign(&groups, 0, 0.2, 11).unwrap();
        assert_eq!(c.seeds.len(), 20);
        assert_eq!(c.holdout_positives.len(), 80);
        let seeds: BTreeSet<&String> = c.seeds.iter().collect();
        assert!(c.holdout_positives.iter().all(|u| !seeds.contains(u)));
    }

    #[test]
    fn campaign_too_small_group_is_an_error() {
        let groups: BTreeMap<String, usize> = (0..5).map(|i| (format!("u{i}"), 0)).collect();
        assert!(make_campaign(&groups, 0, 0.2, 1).is_err());
        assert!(make_campaign(&groups, 9, 0.5, 1).is_err());
    }

    #[test]
    fn groups_parser_contracts() {
        assert!(parse_groups("u1\t0\nu2\t1\n", "g").is_ok());
        assert!(parse_groups("", "g").is_err());
        assert!(parse_groups("u1 0\n", "g").is_err());
        assert!(parse_groups("u1\tx\n", "g").is_err());
        assert!(parse_groups("u1\t0\nu1\t1\n", "g").is_err());
    }
}
