//! CSV ingestion and export.
//!
//! Input schemas:
//!
//! - `returns.csv`: `company,date,log_return` (ISO dates, one row per observed cell)
//! - `loadings.csv`: `company,month,factor,value` (`YYYY-MM`, factor as `style:x`,
//!   `country:XX`, `industry:x` or `market`)
//! - `mcaps.csv`: `company,month,market_cap`

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::Deserialize;

use crate::calendar::{MonthId, TradingCalendar};
use crate::error::{Error, Result};
use crate::panel::{canonical_order, index_map, Factor, LoadingPanel, MarketCapSeries, ReturnPanel, SeriesPanel};

#[derive(Debug, Deserialize)]
struct ReturnRow {
    company: String,
    date: String,
    log_return: String,
}

#[derive(Debug, Deserialize)]
struct LoadingRow {
    company: String,
    month: String,
    factor: String,
    value: String,
}

#[derive(Debug, Deserialize)]
struct CapRow {
    company: String,
    month: String,
    market_cap: String,
}

/// The three aligned input panels.
#[derive(Debug, Clone)]
pub struct Panels {
    pub returns: ReturnPanel,
    pub loadings: LoadingPanel,
    pub mcaps: MarketCapSeries,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn check_header(rdr: &mut csv::Reader<impl Read>, file: &str, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Ok(());
    }
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            file: file.into(),
            line: 1,
            message: format!("expected header {:?}, got {:?}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_f64(file: &str, line: u64, field: &str, s: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            file: file.into(),
            line,
            message: format!("{field} {s:?} is not a finite number"),
        }),
    }
}

fn parse_date(file: &str, line: u64, s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| Error::Parse {
        file: file.into(),
        line,
        message: format!("date {s:?} is not ISO-8601 (YYYY-MM-DD)"),
    })
}

fn parse_month(file: &str, line: u64, s: &str) -> Result<MonthId> {
    s.parse::<MonthId>().map_err(|_| Error::Parse {
        file: file.into(),
        line,
        message: format!("month {s:?} is not YYYY-MM"),
    })
}

fn records<R: Read, T: for<'de> Deserialize<'de>>(
    rdr: &mut csv::Reader<R>,
    file: &str,
) -> Result<Vec<(u64, T)>> {
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            file: file.into(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = line_of(&rec);
        let row: T = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            file: file.into(),
            line,
            message: e.to_string(),
        })?;
        out.push((line, row));
    }
    Ok(out)
}

/// Calendar as the union of every date in a returns file.
pub fn calendar_from_returns(path: &Path) -> Result<TradingCalendar> {
    let file = file_label(path);
    let mut rdr = reader(open(path)?);
    check_header(&mut rdr, &file, &["company", "date", "log_return"])?;
    let rows: Vec<(u64, ReturnRow)> = records(&mut rdr, &file)?;
    let mut dates = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        dates.push(parse_date(&file, line, &row.date)?);
    }
    Ok(TradingCalendar::from_dates(dates))
}

/// Reads a returns CSV onto `calendar`. Companies are sorted by id.
pub fn read_returns<R: Read>(input: R, file: &str, calendar: &TradingCalendar) -> Result<ReturnPanel> {
    let mut rdr = reader(input);
    check_header(&mut rdr, file, &["company", "date", "log_return"])?;
    let rows: Vec<(u64, ReturnRow)> = records(&mut rdr, file)?;
    let companies: Vec<String> = rows
        .iter()
        .map(|(_, r)| r.company.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index = index_map(&companies);
    let mut panel = SeriesPanel::missing(companies.clone(), calendar.clone());
    let mut seen = HashSet::new();
    for (line, row) in &rows {
        let date = parse_date(file, *line, &row.date)?;
        let t = calendar.index_of(date).ok_or_else(|| Error::UnknownDate {
            file: file.into(),
            line: *line,
            date: row.date.clone(),
        })?;
        let v = parse_f64(file, *line, "log_return", &row.log_return)?;
        let k = index[row.company.as_str()];
        if !seen.insert((k, t)) {
            return Err(Error::Conflict {
                file: file.into(),
                line: *line,
                key: format!("({}, {})", row.company, row.date),
            });
        }
        panel.set(k, t, Some(v));
    }
    Ok(panel)
}

/// Reads a loadings CSV. Rows for companies outside `companies` are ignored;
/// the factor set always contains `market`.
pub fn read_loadings<R: Read>(
    input: R,
    file: &str,
    companies: &[String],
    calendar: &TradingCalendar,
) -> Result<LoadingPanel> {
    let mut rdr = reader(input);
    check_header(&mut rdr, file, &["company", "month", "factor", "value"])?;
    let rows: Vec<(u64, LoadingRow)> = records(&mut rdr, file)?;
    let months = calendar.months();
    let mut factors = vec![Factor::market()];
    let mut parsed = Vec::with_capacity(rows.len());
    for (line, row) in &rows {
        let factor = Factor::parse(&row.factor).map_err(|e| Error::Parse {
            file: file.into(),
            line: *line,
            message: e.to_string(),
        })?;
        let month = parse_month(file, *line, &row.month)?;
        if months.binary_search(&month).is_err() {
            return Err(Error::UnknownMonth {
                file: file.into(),
                line: *line,
                month: row.month.clone(),
            });
        }
        let v = parse_f64(file, *line, "value", &row.value)?;
        factors.push(factor.clone());
        parsed.push((*line, row.company.as_str(), month, factor, v));
    }
    let factors = canonical_order(factors);
    let fpos: HashMap<&str, usize> = factors.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
    let index = index_map(companies);
    let mut panel = LoadingPanel::missing(factors.clone(), companies.to_vec(), months.clone());
    let mut seen = HashSet::new();
    for (line, company, month, factor, v) in parsed {
        let Some(&k) = index.get(company) else { continue };
        let m = months.binary_search(&month).expect("checked above");
        let f = fpos[factor.name.as_str()];
        if !seen.insert((k, m, f)) {
            return Err(Error::Conflict {
                file: file.into(),
                line,
                key: format!("({company}, {month}, {factor})"),
            });
        }
        panel.set(k, m, f, v);
    }
    Ok(panel)
}

/// Reads a market-cap CSV. Non-positive caps are rejected.
pub fn read_mcaps<R: Read>(
    input: R,
    file: &str,
    companies: &[String],
    calendar: &TradingCalendar,
) -> Result<MarketCapSeries> {
    let mut rdr = reader(input);
    check_header(&mut rdr, file, &["company", "month", "market_cap"])?;
    let rows: Vec<(u64, CapRow)> = records(&mut rdr, file)?;
    let months = calendar.months();
    let index = index_map(companies);
    let mut caps = MarketCapSeries::missing(companies.to_vec(), months.clone());
    let mut seen = HashSet::new();
    for (line, row) in &rows {
        let month = parse_month(file, *line, &row.month)?;
        let m = months.binary_search(&month).map_err(|_| Error::UnknownMonth {
            file: file.into(),
            line: *line,
            month: row.month.clone(),
        })?;
        let v = parse_f64(file, *line, "market_cap", &row.market_cap)?;
        if v <= 0.0 {
            return Err(Error::Parse {
                file: file.into(),
                line: *line,
                message: format!("market_cap must be positive, got {v}"),
            });
        }
        let Some(&k) = index.get(row.company.as_str()) else { continue };
        if !seen.insert((k, m)) {
            return Err(Error::Conflict {
                file: file.into(),
                line: *line,
                key: format!("({}, {})", row.company, row.month),
            });
        }
        caps.set(k, m, v);
    }
    Ok(caps)
}

/// Loads and aligns the three panels on `calendar`.
pub fn load_panels(
    returns_file: &Path,
    loadings_file: &Path,
    mcaps_file: &Path,
    calendar: &TradingCalendar,
) -> Result<Panels> {
    let returns = read_returns(open(returns_file)?, &file_label(returns_file), calendar)?;
    let companies = returns.ids().to_vec();
    let loadings = read_loadings(open(loadings_file)?, &file_label(loadings_file), &companies, calendar)?;
    let mcaps = read_mcaps(open(mcaps_file)?, &file_label(mcaps_file), &companies, calendar)?;
    Ok(Panels {
        returns,
        loadings,
        mcaps,
    })
}

/// Writes present cells as `<id>,date,<value>` rows under the given header.
pub fn write_series<W: Write>(panel: &SeriesPanel, out: W, header: [&str; 3]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    let cal = panel.calendar();
    for (i, id) in panel.ids().iter().enumerate() {
        for t in 0..panel.n_days() {
            if let Some(v) = panel.get(i, t) {
                w.write_record([id.as_str(), &cal.day(t).to_string(), &v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_returns<W: Write>(panel: &ReturnPanel, out: W) -> Result<()> {
    write_series(panel, out, ["company", "date", "log_return"])
}

pub fn write_loadings<W: Write>(loadings: &LoadingPanel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["company", "month", "factor", "value"])?;
    for (k, c) in loadings.companies().iter().enumerate() {
        for (m, month) in loadings.months().iter().enumerate() {
            for (f, factor) in loadings.factors().iter().enumerate() {
                if let Some(v) = loadings.get(k, m, f) {
                    w.write_record([c.as_str(), &month.to_string(), &factor.name, &v.to_string()])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_mcaps<W: Write>(caps: &MarketCapSeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["company", "month", "market_cap"])?;
    for (k, c) in caps.companies().iter().enumerate() {
        for (m, month) in caps.months().iter().enumerate() {
            if let Some(v) = caps.get(k, m) {
                if !caps.is_proxied(k, m) {
                    w.write_record([c.as_str(), &month.to_string(), &v.to_string()])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Creates `path` for writing, wrapping errors with the path.
pub fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cal() -> TradingCalendar {
        TradingCalendar::weekdays(NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(), 5)
    }

    const RETURNS: &str = "company,date,log_return
a,2020-01-06,0.01
a,2020-01-07,-0.02
a,2020-01-08,0.0
a,2020-01-09,0.03
a,2020-01-10,0.01
b,2020-01-06,0.02
b,2020-01-07,0.01
b,2020-01-08,-0.01
b,2020-01-09,0.00
b,2020-01-10,0.02
c,2020-01-06,0.02
c,2020-01-07,0.01
c,2020-01-09,0.00
c,2020-01-10,0.02
";

    #[test]
    fn three_company_panel_has_one_missing_cell() {
        let p = read_returns(RETURNS.as_bytes(), "returns.csv", &cal()).unwrap();
        assert_eq!(p.ids(), ["a", "b", "c"]);
        assert_eq!(p.missing_count(), 1);
        assert_eq!(p.get(2, 2), None);
        assert_eq!(p.get(0, 1), Some(-0.02));
    }

    #[test]
    fn empty_returns_file_gives_empty_panel() {
        let p = read_returns("company,date,log_return\n".as_bytes(), "returns.csv", &cal()).unwrap();
        assert_eq!(p.n_series(), 0);
        let p = read_returns("".as_bytes(), "returns.csv", &cal()).unwrap();
        assert_eq!(p.n_series(), 0);
    }

    #[test]
    fn date_outside_calendar_is_named() {
        let src = "company,date,log_return\na,2020-01-06,0.1\na,2020-02-03,0.1\n";
        let err = read_returns(src.as_bytes(), "returns.csv", &cal()).unwrap_err();
        match err {
            Error::UnknownDate { line, date, .. } => {
                assert_eq!(date, "2020-02-03");
                assert_eq!(line, 3);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let src = "company,date,log_return\na,2020-01-06,0.1\na,2020-01-07,abc\n";
        let err = read_returns(src.as_bytes(), "returns.csv", &cal()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let src = "company,date,log_return\na,06/01/2020,0.1\n";
        let err = read_returns(src.as_bytes(), "returns.csv", &cal()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let src = "company,date\na,2020-01-06\n";
        assert!(read_returns(src.as_bytes(), "returns.csv", &cal()).is_err());
    }

    #[test]
    fn duplicate_cell_is_a_conflict() {
        let src = "company,date,log_return\na,2020-01-06,0.1\na,2020-01-06,0.2\n";
        let err = read_returns(src.as_bytes(), "returns.csv", &cal()).unwrap_err();
        assert!(matches!(err, Error::Conflict { line: 3, .. }), "{err}");
    }

    #[test]
    fn loadings_and_caps_align_to_companies() {
        let companies = vec!["a".to_string(), "b".to_string()];
        let src = "company,month,factor,value
a,2020-01,style:value,0.5
a,2020-01,country:US,1
b,2020-01,industry:tech,1
zz,2020-01,style:value,9
";
        let l = read_loadings(src.as_bytes(), "loadings.csv", &companies, &cal()).unwrap();
        let names: Vec<_> = l.factors().iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["market", "style:value", "country:US", "industry:tech"]);
        assert_eq!(l.get(0, 0, 1), Some(0.5));
        assert_eq!(l.get(1, 0, 1), None);

        let bad = "company,month,factor,value\na,2020-03,style:value,0.5\n";
        assert!(matches!(
            read_loadings(bad.as_bytes(), "loadings.csv", &companies, &cal()),
            Err(Error::UnknownMonth { .. })
        ));

        let caps = "company,month,market_cap\na,2020-01,1e9\nb,2020-01,3e8\n";
        let c = read_mcaps(caps.as_bytes(), "mcaps.csv", &companies, &cal()).unwrap();
        assert_eq!(c.get(0, 0), Some(1e9));
        let neg = "company,month,market_cap\na,2020-01,-1\n";
        assert!(read_mcaps(neg.as_bytes(), "mcaps.csv", &companies, &cal()).is_err());
    }

    #[test]
    fn write_then_read_returns() {
        let p = read_returns(RETURNS.as_bytes(), "returns.csv", &cal()).unwrap();
        let mut buf = Vec::new();
        write_returns(&p, &mut buf).unwrap();
        let q = read_returns(buf.as_slice(), "returns.csv", &cal()).unwrap();
        assert_eq!(p.ids(), q.ids());
        for i in 0..p.n_series() {
            for t in 0..p.n_days() {
                assert_eq!(p.get(i, t), q.get(i, t));
            }
        }
    }
}
