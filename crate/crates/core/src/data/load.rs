use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};

use super::{DataError, Result, Transaction};

/// Where the basket identifier of a row comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BasketKey {
    Column(String),
    /// One basket per user per calendar day of the timestamp.
    Day,
}

/// Column mapping for a delimited transaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableFormat {
    pub user_col: String,
    pub item_col: String,
    pub basket: BasketKey,
    pub time_col: String,
    /// `None` sniffs tab vs comma from the first line.
    pub delimiter: Option<u8>,
    /// Column names for files without a header row.
    pub columns: Option<Vec<String>>,
    /// Keep only rows whose column equals the value.
    pub filter: Option<(String, String)>,
}

impl Default for TableFormat {
    fn default() -> Self {
        Self {
            user_col: "user_id".into(),
            item_col: "item_id".into(),
            basket: BasketKey::Column("basket_id".into()),
            time_col: "timestamp".into(),
            delimiter: None,
            columns: None,
            filter: None,
        }
    }
}

impl TableFormat {
    /// Kaggle TaFeng export: a basket is one customer's purchases on one date.
    pub fn tafeng() -> Self {
        Self {
            user_col: "CUSTOMER_ID".into(),
            item_col: "PRODUCT_ID".into(),
            basket: BasketKey::Column("TRANSACTION_DT".into()),
            time_col: "TRANSACTION_DT".into(),
            ..Self::default()
        }
    }

    /// Dunnhumby "The Complete Journey" `transaction_data.csv`.
    pub fn dunnhumby() -> Self {
        Self {
            user_col: "household_key".into(),
            item_col: "PRODUCT_ID".into(),
            basket: BasketKey::Column("BASKET_ID".into()),
            time_col: "DAY".into(),
            ..Self::default()
        }
    }

    /// Tianchi `UserBehavior.csv` (no header); purchases grouped by day.
    pub fn taobao() -> Self {
        Self {
            user_col: "user".into(),
            item_col: "item".into(),
            basket: BasketKey::Day,
            time_col: "timestamp".into(),
            delimiter: Some(b','),
            columns: Some(
                ["user", "item", "category", "behavior", "timestamp"]
                    .map(String::from)
                    .to_vec(),
            ),
            filter: Some(("behavior".into(), "buy".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedTransactions {
    pub transactions: Vec<Transaction>,
    /// Rows dropped for a missing/empty field or an unparseable timestamp.
    pub skipped: usize,
}

/// Parses integer seconds, or one of a few common date layouts.
pub fn parse_timestamp(raw: &str) -> Option<i64> {
    let s = raw.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v as i64);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    for fmt in ["%Y-%m-%d", "%m/%d/%Y", "%Y/%m/%d", "%d.%m.%Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(s, fmt) {
            return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp());
        }
    }
    None
}

fn sniff_delimiter(first_line: &str) -> u8 {
    if first_line.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Reads a delimited transaction log.
pub fn load_transactions(path: &Path, format: &TableFormat) -> Result<LoadedTransactions> {
    let display = path.display().to_string();
    let io_err = |source| DataError::Io {
        path: display.clone(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err)?;
    if first.trim().is_empty() {
        return Err(DataError::NoValidRows(display));
    }
    let delimiter = format.delimiter.unwrap_or_else(|| sniff_delimiter(&first));
    let chained = std::io::Cursor::new(first.into_bytes()).chain(reader);
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(format.columns.is_none())
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(chained);

    let header: Vec<String> = match &format.columns {
        Some(cols) => cols.clone(),
        None => csv_reader
            .headers()
            .map_err(|source| DataError::Csv {
                path: display.clone(),
                source,
            })?
            .iter()
            .map(str::to_string)
            .collect(),
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let user_ix = col(&format.user_col)?;
    let item_ix = col(&format.item_col)?;
    let time_ix = col(&format.time_col)?;
    let basket_ix = match &format.basket {
        BasketKey::Column(c) => Some(col(c)?),
        BasketKey::Day => None,
    };
    let filter = match &format.filter {
        Some((c, v)) => Some((col(c)?, v.as_str())),
        None => None,
    };

    let mut transactions = Vec::new();
    let mut skipped = 0;
    for record in csv_reader.records() {
        let record = record.map_err(|source| DataError::Csv {
            path: display.clone(),
            source,
        })?;
        if let Some((fi, want)) = filter {
            if record.get(fi) != Some(want) {
                continue;
            }
        }
        let field = |ix: usize| record.get(ix).filter(|s| !s.is_empty());
        let (Some(user), Some(item), Some(time)) = (field(user_ix), field(item_ix), field(time_ix)) else {
            skipped += 1;
            continue;
        };
        let Some(timestamp) = parse_timestamp(time).filter(|&t| t >= 0) else {
            skipped += 1;
            continue;
        };
        let basket_key = match basket_ix {
            Some(bi) => match field(bi) {
                Some(b) => b.to_string(),
                None => {
                    skipped += 1;
                    continue;
                }
            },
            None => (timestamp.div_euclid(86_400)).to_string(),
        };
        transactions.push(Transaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            basket_key,
            timestamp,
        });
    }
    if transactions.is_empty() {
        return Err(DataError::NoValidRows(display));
    }
    Ok(LoadedTransactions { transactions, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_three_rows() {
        let f = write("user_id,item_id,basket_id,timestamp\nu1,a,b1,10\nu1,b,b1,10\nu2,a,b2,20\n");
        let out = load_transactions(f.path(), &TableFormat::default()).unwrap();
        assert_eq!(out.transactions.len(), 3);
        assert_eq!(out.skipped, 0);
        assert_eq!(
            out.transactions[2],
            Transaction {
                user_id: "u2".into(),
                item_id: "a".into(),
                basket_key: "b2".into(),
                timestamp: 20
            }
        );
    }

    #[test]
    fn empty_item_is_skipped_and_counted() {
        let f = write("user_id,item_id,basket_id,timestamp\nu1,,b1,10\nu1,b,b1,10\n");
        let out = load_transactions(f.path(), &TableFormat::default()).unwrap();
        assert_eq!(out.transactions.len(), 1);
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn tab_delimited_and_dates() {
        let f = write("CUSTOMER_ID\tPRODUCT_ID\tTRANSACTION_DT\n7\t100\t11/1/2000\n7\t101\t11/2/2000\n");
        let out = load_transactions(f.path(), &TableFormat::tafeng()).unwrap();
        assert_eq!(out.transactions.len(), 2);
        assert_eq!(out.transactions[1].timestamp - out.transactions[0].timestamp, 86_400);
        assert_eq!(out.transactions[0].basket_key, "11/1/2000");
    }

    #[test]
    fn headerless_with_filter_and_day_baskets() {
        let f = write("1,10,5,pv,100\n1,11,5,buy,200\n1,12,5,buy,90000\n");
        let out = load_transactions(f.path(), &TableFormat::taobao()).unwrap();
        assert_eq!(out.transactions.len(), 2);
        assert_eq!(out.transactions[0].basket_key, "0");
        assert_eq!(out.transactions[1].basket_key, "1");
    }

    #[test]
    fn empty_file_has_no_valid_rows() {
        let f = write("");
        assert!(matches!(
            load_transactions(f.path(), &TableFormat::default()),
            Err(DataError::NoValidRows(_))
        ));
        let f = write("user_id,item_id,basket_id,timestamp\n");
        assert!(matches!(
            load_transactions(f.path(), &TableFormat::default()),
            Err(DataError::NoValidRows(_))
        ));
    }

    #[test]
    fn missing_column_and_missing_file() {
        let f = write("a,b\n1,2\n");
        assert!(matches!(
            load_transactions(f.path(), &TableFormat::default()),
            Err(DataError::MissingColumn(_))
        ));
        assert!(matches!(
            load_transactions(Path::new("/nonexistent/file.csv"), &TableFormat::default()),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn timestamp_formats() {
        assert_eq!(parse_timestamp("42"), Some(42));
        assert_eq!(parse_timestamp("1970-01-02"), Some(86_400));
        assert_eq!(parse_timestamp("1970-01-01 00:01:00"), Some(60));
        assert_eq!(parse_timestamp("soon"), None);
    }
}
